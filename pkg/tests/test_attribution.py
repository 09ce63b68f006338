import csv

import numpy as np
import pytest

from bayes_tda import attribution as attr
from bayes_tda.attribution import Method
from bayes_tda.errors import NotPositiveDefinite
from bayes_tda.harness.data import BlobsConfig, generate_blobs
from bayes_tda.model import ModelSpec, WeightedDataset, explicit_hessian, sample_gradients, sample_losses
from bayes_tda.posterior import PosteriorSample, PosteriorSampleSet, RandomnessRegime, sample_loo_posteriors
from bayes_tda.training import TrainConfig

SPEC = ModelSpec("MLP", 2, 3, hidden_dim=5, l2_coefficient=0.005)
CFG = TrainConfig(learning_rate=0.02, epochs=5, swa_window=3, batch_size=8)
REGIME = RandomnessRegime("DEInit", t_de=3, t_swa=3, master_seed=1)


@pytest.fixture(scope="module")
def setup():
    train_set, test = generate_blobs(BlobsConfig(classes=3, dim=2, separation=4.0, train_size=10, test_size=4))
    original, cfs = sample_loo_posteriors(SPEC, train_set, CFG, REGIME)
    return train_set, test, original, cfs


def loss(theta, x, y):
    return sample_losses(SPEC, theta, np.asarray(x)[None, :], np.array([y]))[0]


def test_loo_matrix_entries_recomputed(setup):
    train_set, test, original, cfs = setup
    j, z = 4, 2
    m = attr.loo_matrix(SPEC, original, cfs[j], test[z], test_index=z)
    assert m.pair == (j, z) and m.values.shape == (9, 9)
    orig = sorted(original.samples, key=lambda s: s.key)
    cf = sorted(cfs[j].samples, key=lambda s: s.key)
    r = np.random.default_rng(0)
    for _ in range(5):
        t, t2 = r.integers(9, size=2)
        expected = loss(cf[t].params, *test[z]) - loss(orig[t2].params, *test[z])
        assert m.values[t, t2] == pytest.approx(expected, abs=1e-15)
    assert np.array_equal(m.diagonal, np.diag(m.values))


def test_loo_matrix_identical_sets(setup):
    _, test, original, _ = setup
    same = PosteriorSampleSet(original.regime, original.samples, removed_index=0)
    m = attr.loo_matrix(SPEC, original, same, test[0]).values
    # matched differences vanish; cross pairs still compare distinct samples
    assert not m.diagonal().any()
    assert np.allclose(m, -m.T, atol=0)
    one = original.restrict_swa(1)
    single = PosteriorSampleSet(one.regime, one.samples[:1], None)
    single_cf = PosteriorSampleSet(one.regime, one.samples[:1], removed_index=0)
    assert attr.loo_matrix(SPEC, single, single_cf, test[0]).values.tolist() == [[0.0]]


def test_loo_tables_agree_with_matrices(setup):
    _, test, original, cfs = setup
    orig, cf = attr.loo_tables(SPEC, original, cfs, test.features, test.labels)
    assert orig.shape == (9, 4) and cf.shape == (10, 9, 4)
    for j in (0, 7):
        for z in range(4):
            m = attr.loo_matrix(SPEC, original, cfs[j], test[z]).values
            assert np.allclose(cf[j, :, z, None] - orig[None, :, z], m, atol=1e-15)


def test_ats_zero_learning_rate(setup):
    train_set, test, original, _ = setup
    s = attr.ats_scores(SPEC, original, train_set, 3, test[1], CFG, learning_rate=0.0)
    assert s.samples.shape == (9,) and not s.samples.any()


def test_ats_quadratic_one_parameter_taylor():
    """Second-order Taylor oracle: -lr g_z.g_j + lr^2/2 g_j^T H_z g_j at lr = 1e-4."""
    spec = ModelSpec("LogisticRegression", 1, 2)
    data = WeightedDataset(np.array([[1.0], [-0.5]]), [1, 0])
    theta = np.array([0.3, -0.2, 0.0, 0.0])
    post = PosteriorSampleSet(RandomnessRegime(t_de=1, t_swa=1), [PosteriorSample(0, 1, theta)])
    lr = 1e-4
    zx, zy = np.array([0.7]), 1
    g_j = sample_gradients(spec, theta, data.features[:1], data.labels[:1])[0]
    g_z = sample_gradients(spec, theta, zx[None, :], np.array([zy]))[0]
    H_z = explicit_hessian(spec, theta, WeightedDataset(zx[None, :], [zy], num_classes=2))
    expected = -lr * g_z @ g_j + 0.5 * lr ** 2 * g_j @ H_z @ g_j
    got = attr.ats_scores(spec, post, data, 0, (zx, zy), TrainConfig(weight_decay=0.0), learning_rate=lr).samples[0]
    assert got == pytest.approx(expected, abs=1e-8)
    assert abs(got - expected) < 1e-11


def test_if_identity_hessian_is_negative_grad_dot(setup):
    train_set, test, original, _ = setup
    eye = lambda theta: np.eye(SPEC.param_count)
    for j, z in [(0, 0), (5, 3)]:
        f = attr.if_scores(SPEC, original, train_set, j, test[z], damping=0.0, hessian=eye).samples
        g = attr.grad_dot_scores(SPEC, original, train_set, j, test[z]).samples
        assert np.allclose(f, -g, rtol=0, atol=1e-12)


def test_if_large_damping_bound(setup):
    train_set, test, original, _ = setup
    s = attr.if_scores(SPEC, original, train_set, 2, test[0], damping=1e6).samples
    for theta, score in zip(attr._ordered_params(original), s):
        g_j = sample_gradients(SPEC, theta, train_set.features[2:3], train_set.labels[2:3])[0]
        g_z = sample_gradients(SPEC, theta, test.features[:1], test.labels[:1])[0]
        assert abs(score) <= np.linalg.norm(g_j) * np.linalg.norm(g_z) / 1e6


def test_if_zero_test_gradient_gives_zero():
    spec = ModelSpec("LogisticRegression", 1, 2)
    data = WeightedDataset(np.array([[1.0], [-1.0]]), [0, 1])
    # x = 0 and a saturated bias: p is exactly one-hot, so the test gradient is exactly 0
    theta = np.array([0.0, 0.0, 1e3, -1e3])
    post = PosteriorSampleSet(RandomnessRegime(t_de=1, t_swa=1), [PosteriorSample(0, 1, theta)])
    assert not sample_gradients(spec, theta, np.zeros((1, 1)), np.array([0])).any()
    s = attr.if_scores(spec, post, data, 1, (np.zeros(1), 0), damping=1.0).samples
    assert s[0] == 0.0


def test_if_dense_and_cg_agree(setup):
    train_set, test, original, _ = setup
    dense = attr.if_scores(SPEC, original, train_set, 1, test[2], damping=1.0).samples
    cg = attr.if_scores(SPEC, original, train_set, 1, test[2], damping=1.0, solver="CG")
    assert not cg.unconverged
    assert np.allclose(dense, cg.samples, rtol=1e-6, atol=1e-10)


def test_if_indefinite_hessian_advises_damping(setup):
    train_set, test, original, _ = setup
    neg = lambda theta: -np.eye(SPEC.param_count)
    with pytest.raises(NotPositiveDefinite):
        attr.if_scores(SPEC, original, train_set, 1, test[0], damping=0.5, hessian=neg)


def test_grad_dot_properties(setup):
    train_set, _, original, _ = setup
    self_dot = attr.grad_dot_scores(SPEC, original, train_set, 3, (train_set.features[3], train_set.labels[3])).samples
    assert np.all(self_dot >= 0)
    ab = attr.grad_dot_scores(SPEC, original, train_set, 2, (train_set.features[6], train_set.labels[6])).samples
    ba = attr.grad_dot_scores(SPEC, original, train_set, 6, (train_set.features[2], train_set.labels[2])).samples
    assert np.allclose(ab, ba, rtol=1e-13, atol=0)


def test_grad_dot_orthogonal_gradients():
    # theta = 0 gives p = (1/2, 1/2); label-0 gradients are (-x/2, x/2, -1/2, 1/2),
    # so inputs x = 1 and x' = -1 give x x' / 2 + 1/2 = 0
    spec = ModelSpec("LogisticRegression", 1, 2)
    data = WeightedDataset(np.array([[1.0], [0.0]]), [0, 1])
    post = PosteriorSampleSet(RandomnessRegime(t_de=1, t_swa=1), [PosteriorSample(0, 1, np.zeros(4))])
    assert attr.grad_dot_scores(spec, post, data, 0, (np.array([-1.0]), 0)).samples[0] == 0.0


def test_grad_cos_properties(setup):
    train_set, test, original, _ = setup
    point = (train_set.features[4], train_set.labels[4])
    assert np.allclose(attr.grad_cos_scores(SPEC, original, train_set, 4, point).samples, 1.0, atol=1e-12)
    gc = attr.grad_cos_scores(SPEC, original, train_set, 4, test[1]).samples
    gd = attr.grad_dot_scores(SPEC, original, train_set, 4, test[1]).samples
    assert np.all(np.abs(gc) <= 1.0)
    norms = []
    for theta in attr._ordered_params(original):
        g_j = sample_gradients(SPEC, theta, train_set.features[4:5], train_set.labels[4:5])[0]
        g_z = sample_gradients(SPEC, theta, test.features[1:2], test.labels[1:2])[0]
        norms.append(np.linalg.norm(g_j) * np.linalg.norm(g_z))
    assert np.allclose(gc * np.array(norms), gd, rtol=0, atol=1e-12)


def test_grad_cos_zero_norm_is_zero(caplog):
    spec = ModelSpec("LogisticRegression", 1, 2)
    data = WeightedDataset(np.array([[1.0], [2.0]]), [0, 1])
    # saturated logits make the first sample's gradient underflow to exactly zero
    theta = np.array([1e3, -1e3, 0.0, 0.0])
    post = PosteriorSampleSet(RandomnessRegime(t_de=1, t_swa=1), [PosteriorSample(0, 1, theta)])
    with caplog.at_level("WARNING"):
        s = attr.grad_cos_scores(spec, post, data, 0, (np.array([2.0]), 1)).samples
    assert s[0] == 0.0
    assert "zero gradient norm" in caplog.text


def test_tracin_is_mean_of_checkpoint_grad_dots(setup):
    train_set, test, original, _ = setup
    tr = attr.tracin_scores(SPEC, original, train_set, 6, test[3]).samples
    assert tr.shape == (3,)
    for m, group in original.by_member().items():
        dots = []
        for s in group:
            g_j = sample_gradients(SPEC, s.params, train_set.features[6:7], train_set.labels[6:7])[0]
            g_z = sample_gradients(SPEC, s.params, test.features[3:4], test.labels[3:4])[0]
            dots.append(g_j @ g_z)
        assert tr[m] == pytest.approx(sum(dots) / len(dots), abs=1e-12)


def test_tracin_single_checkpoint_equals_grad_dot(setup):
    train_set, test, original, _ = setup
    one = original.restrict_swa(1)
    assert np.array_equal(attr.tracin_scores(SPEC, one, train_set, 2, test[0]).samples,
                          attr.grad_dot_scores(SPEC, one, train_set, 2, test[0]).samples)
    theta = original.samples[0].params
    const = {0: [theta, theta, theta]}
    gd = attr.grad_dot_scores(SPEC, PosteriorSampleSet(REGIME, [PosteriorSample(0, 1, theta)]),
                              train_set, 2, test[0]).samples
    assert attr.tracin_scores(SPEC, const, train_set, 2, test[0]).samples[0] == pytest.approx(gd[0], abs=1e-15)


def test_tables_match_per_pair_functions(setup):
    train_set, test, original, _ = setup
    tables = attr.estimator_tables(SPEC, original, train_set, test.features, test.labels, CFG, damping=1.0)
    assert tables[Method.TRACIN].shape == (3, 10, 4)
    for m in (Method.ATS, Method.IF, Method.GD, Method.GC):
        assert tables[m].shape == (9, 10, 4)
    for j, z in [(0, 0), (9, 3), (4, 1)]:
        assert np.allclose(tables[Method.ATS][:, j, z], attr.ats_scores(SPEC, original, train_set, j, test[z], CFG).samples, atol=1e-14)
        assert np.allclose(tables[Method.IF][:, j, z], attr.if_scores(SPEC, original, train_set, j, test[z], damping=1.0).samples, atol=1e-12)
        assert np.allclose(tables[Method.GD][:, j, z], attr.grad_dot_scores(SPEC, original, train_set, j, test[z]).samples, atol=1e-14)
        assert np.allclose(tables[Method.GC][:, j, z], attr.grad_cos_scores(SPEC, original, train_set, j, test[z]).samples, atol=1e-14)
        assert np.allclose(tables[Method.TRACIN][:, j, z], attr.tracin_scores(SPEC, original, train_set, j, test[z]).samples, atol=1e-14)


def test_estimators_deterministic(setup):
    train_set, test, original, _ = setup
    a = attr.estimator_tables(SPEC, original, train_set, test.features, test.labels, CFG, damping=1.0)
    b = attr.estimator_tables(SPEC, original, train_set, test.features, test.labels, CFG, damping=1.0)
    for m in a:
        assert np.array_equal(a[m], b[m])


def test_scores_csv(tmp_path):
    table = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2) / 7
    path = tmp_path / "s.csv"
    attr.write_scores_csv(path, table)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["train_index", "test_index", "sample_id", "score"]
    assert len(rows) == 12
    for r in rows:
        assert float(r["score"]) == table[int(r["sample_id"]), int(r["train_index"]), int(r["test_index"])]
