import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import logsumexp
from scipy.stats import norm

from bayes_tda.errors import NonFiniteLoss, ParamCountTooLarge
from bayes_tda.model import (
    ModelSpec,
    WeightedDataset,
    explicit_hessian,
    gelu,
    hessian_vector_product,
    loss_gradient,
    pack,
    per_sample_losses,
    sample_gradients,
    sample_losses,
    weighted_gradient_sum,
)

from conftest import random_problem


def reference_losses(spec, theta, X, y):
    """Cross-entropy written out with explicit loops over layers."""
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind.value == "LogisticRegression":
        W = theta[:c * d].reshape(c, d)
        b = theta[c * d:]
        z = X @ W.T + b
    else:
        W1 = theta[:h * d].reshape(h, d)
        b1 = theta[h * d:h * d + h]
        o = h * d + h
        W2 = theta[o:o + c * h].reshape(c, h)
        b2 = theta[o + c * h:]
        pre = X @ W1.T + b1
        z = (pre * norm.cdf(pre)) @ W2.T + b2
    return np.array([logsumexp(z[i]) - z[i, y[i]] for i in range(len(y))])


def reference_objective(spec, theta, data):
    w = data.loss_weights
    losses = reference_losses(spec, theta, data.features, data.labels)
    return float(w @ losses) / w.sum() + 0.5 * spec.l2_coefficient * float(theta @ theta)


def fd_gradient(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_param_count_and_layout():
    lr = ModelSpec("LogisticRegression", 4, 3)
    mlp = ModelSpec("MLP", 4, 3, hidden_dim=5)
    assert lr.param_count == 4 * 3 + 3
    assert mlp.param_count == 4 * 5 + 5 + 5 * 3 + 3
    theta = np.arange(mlp.param_count, dtype=float)
    assert np.array_equal(pack(mlp.unpack(theta)), theta)
    assert mlp.bias_mask().sum() == 5 + 3


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("MLP", 2, 3, hidden_dim=0)
    with pytest.raises(ValueError):
        ModelSpec("LogisticRegression", 2, 3, l2_coefficient=-1.0)
    with pytest.raises(ValueError):
        ModelSpec("LogisticRegression", 2, 3, hidden_dim=4)


def test_dataset_validation():
    X = np.zeros((3, 2))
    with pytest.raises(ValueError):
        WeightedDataset(X, [0, 1, 5], num_classes=2)
    with pytest.raises(ValueError):
        WeightedDataset(X, [0, 1, 1], loss_weights=[0.5, 1, 1])
    with pytest.raises(ValueError):
        WeightedDataset(X, [0, 1, 1], loss_weights=[0, 0, 0])
    with pytest.raises(ValueError):
        WeightedDataset(np.full((3, 2), np.nan), [0, 1, 1])
    d = WeightedDataset(X, [0, 1, 1]).without(1)
    assert list(d.loss_weights) == [1, 0, 1]


def test_gelu_exact_form():
    x = np.linspace(-6, 6, 101)
    assert np.allclose(gelu(x), x * norm.cdf(x), rtol=1e-15, atol=1e-300)


def test_uniform_logits_give_log_c():
    spec = ModelSpec("LogisticRegression", 2, 3)
    data = WeightedDataset(np.zeros((4, 2)), [0, 1, 2, 0], num_classes=3)
    assert np.allclose(per_sample_losses(spec, np.zeros(spec.param_count), data), np.log(3), atol=1e-15)


@pytest.mark.parametrize("kind", ["LogisticRegression", "MLP"])
def test_losses_match_independent_implementation(kind, rng):
    spec, data, theta = random_problem(kind, rng)
    assert np.allclose(per_sample_losses(spec, theta, data),
                       reference_losses(spec, theta, data.features, data.labels), atol=1e-13)


def test_losses_ignore_weights(rng):
    spec, data, theta = random_problem("MLP", rng)
    assert np.array_equal(per_sample_losses(spec, theta, data), per_sample_losses(spec, theta, data.without(2)))


def test_non_finite_loss_raises():
    spec = ModelSpec("LogisticRegression", 1, 2)
    data = WeightedDataset(np.array([[np.inf]]), [0], num_classes=2)
    with pytest.raises(NonFiniteLoss):
        per_sample_losses(spec, np.ones(spec.param_count), data)


def test_logistic_gradient_closed_form(rng):
    spec, data, theta = random_problem("LogisticRegression", rng, l2=0.0)
    W = theta[:9].reshape(3, 3)
    b = theta[9:]
    for i in range(len(data)):
        x, y = data.features[i], data.labels[i]
        z = W @ x + b
        p = np.exp(z - logsumexp(z))
        p[y] -= 1.0
        expected = np.concatenate([np.outer(p, x).ravel(), p])
        assert np.allclose(loss_gradient(spec, theta, data, [i]), expected, atol=1e-14)
        assert np.allclose(sample_gradients(spec, theta, data.features, data.labels)[i], expected, atol=1e-14)


@pytest.mark.parametrize("kind", ["LogisticRegression", "MLP"])
def test_gradient_finite_differences(kind):
    for seed in range(20):
        r = np.random.default_rng(seed)
        spec, data, theta = random_problem(kind, r)
        data = data.without(int(r.integers(len(data))))
        g = loss_gradient(spec, theta, data)
        fd = fd_gradient(lambda t: reference_objective(spec, t, data), theta)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_gradient_fd_mlp_100_params():
    r = np.random.default_rng(3)
    spec, data, theta = random_problem("MLP", r, d=6, c=4, h=9, n=20)
    assert spec.param_count == 6 * 9 + 9 + 9 * 4 + 4 == 103
    g = loss_gradient(spec, theta, data)
    fd = fd_gradient(lambda t: reference_objective(spec, t, data), theta)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) <= 1e-5


def test_zero_weight_gradient_is_l2_term(rng):
    spec, data, theta = random_problem("MLP", rng)
    data.loss_weights[:] = 0.0
    data.loss_weights[0] = 1.0
    assert np.array_equal(loss_gradient(spec, theta, data, [1, 2]), spec.l2_coefficient * theta)


def test_weight_linearity(rng):
    spec, data, theta = random_problem("MLP", rng)
    n = len(data)
    w1 = (np.arange(n) % 2).astype(float)
    w2 = 1.0 - w1
    X, y = data.features, data.labels
    total = weighted_gradient_sum(spec, theta, X, y, w1 + w2)
    parts = weighted_gradient_sum(spec, theta, X, y, w1) + weighted_gradient_sum(spec, theta, X, y, w2)
    assert np.allclose(total, parts, atol=1e-13)


def test_stacked_parameters_match_single(rng):
    spec, data, theta = random_problem("MLP", rng)
    stack = np.stack([theta, 2 * theta, -theta])
    losses = sample_losses(spec, stack, data.features, data.labels)
    for k in range(3):
        assert np.array_equal(losses[k], sample_losses(spec, stack[k], data.features, data.labels))


@pytest.mark.parametrize("kind", ["LogisticRegression", "MLP"])
def test_hvp_matches_explicit_and_fd(kind):
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        spec, data, theta = random_problem(kind, r, d=5, c=3, h=10)
        assert spec.param_count <= 200
        H = explicit_hessian(spec, theta, data)
        for k in range(spec.param_count):
            e = np.zeros(spec.param_count)
            e[k] = 1.0
            assert np.allclose(hessian_vector_product(spec, theta, data, e), H[:, k], atol=1e-6)
        v = r.standard_normal(spec.param_count)
        h = 1e-5
        fd = (loss_gradient(spec, theta + h * v, data) - loss_gradient(spec, theta - h * v, data)) / (2 * h)
        assert np.allclose(hessian_vector_product(spec, theta, data, v), fd, atol=1e-6)


def test_hvp_trivial_cases(rng):
    spec, data, theta = random_problem("MLP", rng)
    assert not hessian_vector_product(spec, theta, data, np.zeros(spec.param_count)).any()
    data.loss_weights[:] = 0.0
    data.loss_weights[0] = 1.0
    v = rng.standard_normal(spec.param_count)
    assert np.allclose(hessian_vector_product(spec, theta, data, v, indices=[1, 2]), spec.l2_coefficient * v)


def test_hessian_of_three_param_model(rng):
    spec = ModelSpec("LogisticRegression", 1, 2, l2_coefficient=0.1)
    assert spec.param_count == 4
    data = WeightedDataset(rng.standard_normal((5, 1)), [0, 1, 1, 0, 1])
    theta = rng.standard_normal(4)
    H = explicit_hessian(spec, theta, data)
    for k in range(4):
        assert np.array_equal(H[:, k], hessian_vector_product(spec, theta, data, np.eye(4)[k]))


def test_logistic_hessian_kronecker_form(rng):
    """Per-sample logistic Hessian is (diag p - p p^T) kron (x~ x~^T), reordered to [W, b]."""
    spec, data, theta = random_problem("LogisticRegression", rng, l2=0.0)
    d, c = 3, 3
    W, b = theta[:9].reshape(c, d), theta[9:]
    H = np.zeros((12, 12))
    for x in data.features:
        z = W @ x + b
        p = np.exp(z - logsumexp(z))
        A = np.diag(p) - np.outer(p, p)
        xa = np.append(x, 1.0)
        full = np.kron(A, np.outer(xa, xa))  # index (class, feature-or-bias)
        order = [cls * (d + 1) + k for cls in range(c) for k in range(d)] + [cls * (d + 1) + d for cls in range(c)]
        H += full[np.ix_(order, order)]
    H /= len(data)
    assert np.allclose(explicit_hessian(spec, theta, data), H, atol=1e-13)


def test_hessian_symmetric_and_damped_pd_on_separable_data():
    r = np.random.default_rng(5)
    X = np.vstack([r.normal(-5, 0.3, (10, 2)), r.normal(5, 0.3, (10, 2))])
    y = np.repeat([0, 1], 10)
    spec = ModelSpec("LogisticRegression", 2, 2)
    data = WeightedDataset(X, y)
    theta = r.standard_normal(spec.param_count)
    H = explicit_hessian(spec, theta, data)
    assert np.max(np.abs(H - H.T)) <= 1e-8
    assert np.linalg.eigvalsh(H + 0.005 * np.eye(spec.param_count)).min() > 0


def test_explicit_hessian_size_guard():
    spec = ModelSpec("MLP", 100, 10, hidden_dim=30)
    data = WeightedDataset(np.zeros((2, 100)), [0, 1], num_classes=10)
    with pytest.raises(ParamCountTooLarge):
        explicit_hessian(spec, np.zeros(spec.param_count), data)


@given(st.integers(0, 10**6), st.sampled_from(["LogisticRegression", "MLP"]))
def test_hessian_symmetry_property(seed, kind):
    r = np.random.default_rng(seed)
    spec, data, theta = random_problem(kind, r, n=6)
    H = explicit_hessian(spec, theta, data)
    assert np.max(np.abs(H - H.T)) <= 1e-8
