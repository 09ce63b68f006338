import json

import numpy as np
import pytest

from bayes_tda.errors import MismatchedSampleSets
from bayes_tda.harness.data import BlobsConfig, generate_blobs
from bayes_tda.model import ModelSpec
from bayes_tda.posterior import (
    PosteriorSample,
    PosteriorSampleSet,
    RandomnessRegime,
    matched_pairs,
    read_sample_set,
    sample_loo_posteriors,
    sample_posterior,
    write_sample_set,
)
from bayes_tda.training import TrainConfig, train

SPEC = ModelSpec("MLP", 2, 3, hidden_dim=6, l2_coefficient=0.005)
CFG = TrainConfig(learning_rate=0.01, epochs=4, swa_window=3, batch_size=8)


@pytest.fixture(scope="module")
def data():
    return generate_blobs(BlobsConfig(classes=3, dim=2, separation=4.0, train_size=12, test_size=5))


def test_regime_seed_semantics():
    init = RandomnessRegime("DEInit", t_de=4, master_seed=3)
    batch = RandomnessRegime("DEBatch", t_de=4, master_seed=3)
    pinned = RandomnessRegime("DEInit", t_de=4, master_seed=3, pin_batch_seed=True)
    assert len({init.member_seeds(m)[0] for m in range(4)}) == 4
    assert len({init.member_seeds(m)[1] for m in range(4)}) == 4
    assert len({batch.member_seeds(m)[0] for m in range(4)}) == 1
    assert len({batch.member_seeds(m)[1] for m in range(4)}) == 4
    assert len({pinned.member_seeds(m)[1] for m in range(4)}) == 1
    assert RandomnessRegime().T == 50
    with pytest.raises(ValueError):
        RandomnessRegime(t_de=0)


def test_single_sample_posterior_is_one_training(data):
    train_set, _ = data
    regime = RandomnessRegime("DEInit", t_de=1, t_swa=1, master_seed=2)
    post = sample_posterior(SPEC, train_set, CFG, regime)
    assert len(post) == 1
    init_seed, batch_seed = regime.member_seeds(0)
    assert np.array_equal(post.samples[0].params, train(SPEC, train_set, CFG, init_seed, batch_seed).final_params)


def test_sample_count_and_keys(data):
    train_set, _ = data
    post = sample_posterior(SPEC, train_set, CFG, RandomnessRegime("DEInit", t_de=3, t_swa=2))
    assert len(post) == 6
    assert sorted(s.key for s in post.samples) == [(m, e) for m in range(3) for e in (3, 4)]
    assert len(post.restrict_swa(1)) == 3
    assert all(s.checkpoint_epoch == 4 for s in post.restrict_swa(1).samples)


def test_t_swa_larger_than_window_rejected(data):
    with pytest.raises(ValueError):
        sample_posterior(SPEC, data[0], CFG, RandomnessRegime(t_de=1, t_swa=4))


def test_debatch_members_share_initialization(data, monkeypatch):
    import bayes_tda.training as tr
    inits = []
    real = tr.initialize_params

    def spy(spec, rng):
        out = real(spec, rng)
        inits.append(out)
        return out

    monkeypatch.setattr(tr, "initialize_params", spy)
    sample_posterior(SPEC, data[0], CFG, RandomnessRegime("DEBatch", t_de=3, t_swa=1))
    assert len(inits) == 3 and all(np.array_equal(inits[0], x) for x in inits)


def test_removing_zero_weight_sample_is_identity(data):
    train_set = data[0].without(2)
    regime = RandomnessRegime("DEInit", t_de=2, t_swa=2)
    a = sample_posterior(SPEC, train_set, CFG, regime)
    b = sample_posterior(SPEC, train_set, CFG, regime, removed_index=2)
    for (p, q) in matched_pairs(a, b):
        assert np.array_equal(p, q)


def test_loo_posteriors_match_individual_runs(data):
    train_set, _ = data
    regime = RandomnessRegime("DEBatch", t_de=2, t_swa=2, master_seed=9)
    original, cfs = sample_loo_posteriors(SPEC, train_set, CFG, regime, indices=[0, 5])
    for j in (0, 5):
        direct = sample_posterior(SPEC, train_set, CFG, regime, removed_index=j)
        for (p, q) in zip(sorted(direct.samples, key=lambda s: s.key), sorted(cfs[j].samples, key=lambda s: s.key)):
            assert p.key == q.key and np.array_equal(p.params, q.params)
        assert cfs[j].seeds == original.seeds


def test_parallel_equals_serial(data):
    train_set, _ = data
    regime = RandomnessRegime("DEInit", t_de=3, t_swa=2)
    serial, cf_s = sample_loo_posteriors(SPEC, train_set, CFG, regime, indices=[1, 2], workers=1)
    parallel, cf_p = sample_loo_posteriors(SPEC, train_set, CFG, regime, indices=[1, 2], workers=2)
    assert np.array_equal(serial.params_matrix(), parallel.params_matrix())
    for j in (1, 2):
        assert np.array_equal(cf_s[j].params_matrix(), cf_p[j].params_matrix())


def test_workers_env_var(monkeypatch):
    from bayes_tda.posterior import default_workers
    monkeypatch.setenv("BTDA_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("BTDA_WORKERS")
    assert default_workers() == 1


def _toy_set(keys, removed=None, regime=None, seed=0):
    r = np.random.default_rng(seed)
    regime = regime or RandomnessRegime(t_de=2, t_swa=2)
    return PosteriorSampleSet(regime, [PosteriorSample(m, e, r.standard_normal(4)) for m, e in keys], removed)


def test_matched_pairs_keyed_not_positional():
    keys = [(0, 1), (0, 2), (1, 1), (1, 2)]
    a = _toy_set(keys)
    b = _toy_set(keys, removed=0, seed=1)
    shuffled = PosteriorSampleSet(b.regime, [b.samples[i] for i in (3, 1, 0, 2)], 0)
    pairs = matched_pairs(a, shuffled)
    assert len(pairs) == 4
    for (p, q), k in zip(pairs, sorted(keys)):
        assert np.array_equal(q, {s.key: s.params for s in b.samples}[k])


def test_matched_pairs_errors():
    keys = [(0, 1), (1, 1)]
    with pytest.raises(MismatchedSampleSets):
        matched_pairs(_toy_set(keys), _toy_set(keys))
    with pytest.raises(MismatchedSampleSets):
        matched_pairs(_toy_set(keys), _toy_set([(0, 1), (2, 1)], removed=1))
    with pytest.raises(MismatchedSampleSets):
        matched_pairs(_toy_set(keys), _toy_set(keys, removed=1, regime=RandomnessRegime(t_de=2, t_swa=2, master_seed=5)))
    with pytest.raises(ValueError):
        _toy_set([(0, 1), (0, 1)])


def test_sample_set_files_round_trip(tmp_path, data):
    post = sample_posterior(SPEC, data[0], CFG, RandomnessRegime("DEBatch", t_de=2, t_swa=2), removed_index=3)
    manifest = write_sample_set(post, tmp_path)
    doc = json.loads(manifest.read_text())
    assert doc["removed_index"] == 3 and doc["regime"]["kind"] == "DEBatch"
    assert len(doc["checkpoints"]) == 4
    back = read_sample_set(manifest)
    assert back.regime == post.regime and back.seeds == post.seeds
    assert np.array_equal(back.params_matrix(), np.stack([s.params for s in sorted(post.samples, key=lambda s: s.key)]))
