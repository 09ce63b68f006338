import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bayes_tda.model import ModelSpec, WeightedDataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_problem(kind, rng, n=12, d=3, c=3, h=4, l2=0.01):
    """Small random classification problem and parameter vector."""
    spec = ModelSpec(kind, d, c, hidden_dim=h if kind == "MLP" else 0, l2_coefficient=l2)
    data = WeightedDataset(rng.standard_normal((n, d)), rng.integers(0, c, n), num_classes=c)
    theta = 0.5 * rng.standard_normal(spec.param_count)
    return spec, data, theta


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
