"""Ground-truth (leave-one-out) and estimated attribution distributions.

Every estimator returns one score per posterior sample, so each train-test
pair yields a distribution rather than a point value. Two entry points
exist for each method: a per-pair function mirroring the definition, and a
table builder (``estimator_tables``) that scores all pairs at once from the
same per-sample gradients. The per-pair functions double as a reference for
the tables in the tests.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteLoss, NotPositiveDefinite
from .model import (
    MAX_EXPLICIT_PARAMS,
    ModelSpec,
    WeightedDataset,
    explicit_hessian,
    objective_hvp,
    sample_gradients,
    sample_losses,
)
from .numeric import conjugate_gradient, solve_spd
from .posterior import PosteriorSampleSet, matched_pairs
from .training import TrainConfig

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


class Method(str, Enum):
    LOO = "LOO"
    ATS = "ATS"
    IF = "IF"
    GD = "GD"
    GC = "GC"
    TRACIN = "TracIn"


ALL_METHODS = tuple(Method)


@dataclass
class EstimatorScoreSamples:
    method: Method
    pair: tuple[int, int]
    samples: np.ndarray
    # CG solves that hit max_iter, by sample position (IF only)
    unconverged: list[int] = field(default_factory=list)


@dataclass
class LossDifferenceMatrix:
    """``values[t, t'] = L(z; theta_without_j^(t)) - L(z; theta^(t'))``."""

    pair: tuple[int, int]
    values: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()


def _point(test_point):
    x, y = test_point
    return np.asarray(x, dtype=np.float64).reshape(1, -1), np.asarray([y], dtype=np.int64)


# --------------------------------------------------------------------------
# Per-pair definitions
# --------------------------------------------------------------------------

def loo_matrix(spec: ModelSpec, original: PosteriorSampleSet, counterfactual: PosteriorSampleSet,
               test_point, test_index: int = 0) -> LossDifferenceMatrix:
    pairs = matched_pairs(original, counterfactual)
    X, y = _point(test_point)
    try:
        orig = sample_losses(spec, np.stack([p for p, _ in pairs]), X, y)[:, 0]
        cf = sample_losses(spec, np.stack([q for _, q in pairs]), X, y)[:, 0]
    except NonFiniteLoss as exc:
        raise NonFiniteLoss(f"pair (j={counterfactual.removed_index}, z={test_index}): {exc}") from None
    return LossDifferenceMatrix((counterfactual.removed_index, test_index), cf[:, None] - orig[None, :])


def _ordered_params(sample_set: PosteriorSampleSet) -> np.ndarray:
    return np.stack([s.params for s in sorted(sample_set.samples, key=lambda s: s.key)])


def ats_scores(spec: ModelSpec, original: PosteriorSampleSet, data: WeightedDataset, j: int,
               test_point, config: TrainConfig, learning_rate: float | None = None,
               test_index: int = 0) -> EstimatorScoreSamples:
    lr = config.learning_rate if learning_rate is None else learning_rate
    X, y = _point(test_point)
    scores = []
    for theta in _ordered_params(original):
        g_j = sample_gradients(spec, theta, data.features[j:j + 1], data.labels[j:j + 1])[0]
        theta_plus = theta - lr * (g_j + spec.l2_coefficient * theta)
        scores.append(sample_losses(spec, theta_plus, X, y)[0] - sample_losses(spec, theta, X, y)[0])
    return EstimatorScoreSamples(Method.ATS, (j, test_index), np.array(scores))


def _damped_solve(spec, theta, data, rhs, damping, solver, hessian, include_l2):
    """Solve ``(H + damping I) x = rhs`` with rhs of shape (P,) or (P, k); returns (x, converged)."""
    P = spec.param_count
    l2_shift = 0.0 if include_l2 else spec.l2_coefficient
    if hessian is not None:
        H = np.asarray(hessian(theta), dtype=np.float64)
        A = 0.5 * (H + H.T) + (damping - l2_shift) * np.eye(P)
        return solve_spd(A, rhs), True
    if solver == "Dense" and P <= MAX_EXPLICIT_PARAMS:
        H = explicit_hessian(spec, theta, data)
        A = 0.5 * (H + H.T) + (damping - l2_shift) * np.eye(P)
        try:
            return solve_spd(A, rhs), True
        except NotPositiveDefinite as exc:
            raise NotPositiveDefinite(f"{exc} (IF damping is {damping})") from None

    def op(v):
        return objective_hvp(spec, theta, data.features, data.labels, data.loss_weights, v) + (damping - l2_shift) * v

    rhs2 = rhs if rhs.ndim == 2 else rhs[:, None]
    cols, ok = [], True
    for k in range(rhs2.shape[1]):
        res = conjugate_gradient(op, rhs2[:, k], tol=1e-10, max_iter=10 * P)
        ok &= res.converged
        cols.append(res.x)
    x = np.stack(cols, axis=1)
    return (x if rhs.ndim == 2 else x[:, 0]), ok


def if_scores(spec: ModelSpec, original: PosteriorSampleSet, data: WeightedDataset, j: int,
              test_point, damping: float = 0.005, solver: str = "Dense",
              hessian: Callable[[np.ndarray], np.ndarray] | None = None,
              include_l2: bool = True, test_index: int = 0) -> EstimatorScoreSamples:
    """``-grad L(z)^T (H + damping I)^{-1} grad L(z_j)`` per posterior sample.

    ``H`` is the full training-objective Hessian (weights and L2 included
    unless ``include_l2`` is False). ``hessian`` replaces it with a callable
    ``theta -> matrix``, e.g. an identity test double.
    """
    X, y = _point(test_point)
    scores, unconverged = [], []
    for t, theta in enumerate(_ordered_params(original)):
        g_j = sample_gradients(spec, theta, data.features[j:j + 1], data.labels[j:j + 1])[0]
        g_z = sample_gradients(spec, theta, X, y)[0]
        x, ok = _damped_solve(spec, theta, data, g_j, damping, solver, hessian, include_l2)
        if not ok:
            unconverged.append(t)
        scores.append(-float(g_z @ x))
    return EstimatorScoreSamples(Method.IF, (j, test_index), np.array(scores), unconverged)


def grad_dot_scores(spec: ModelSpec, original: PosteriorSampleSet, data: WeightedDataset, j: int,
                    test_point, test_index: int = 0) -> EstimatorScoreSamples:
    X, y = _point(test_point)
    scores = []
    for theta in _ordered_params(original):
        g_j = sample_gradients(spec, theta, data.features[j:j + 1], data.labels[j:j + 1])[0]
        g_z = sample_gradients(spec, theta, X, y)[0]
        scores.append(float(g_j @ g_z))
    return EstimatorScoreSamples(Method.GD, (j, test_index), np.array(scores))


def _cosine(dot, norm_a, norm_b):
    denom = norm_a * norm_b
    zero = (norm_a <= ZERO_NORM) | (norm_b <= ZERO_NORM)
    if np.any(zero):
        log.warning("zero gradient norm in %d cosine score(s); defined as 0", int(np.sum(zero)))
    return np.where(zero, 0.0, dot / np.where(zero, 1.0, denom))


def grad_cos_scores(spec: ModelSpec, original: PosteriorSampleSet, data: WeightedDataset, j: int,
                    test_point, test_index: int = 0) -> EstimatorScoreSamples:
    X, y = _point(test_point)
    scores = []
    for theta in _ordered_params(original):
        g_j = sample_gradients(spec, theta, data.features[j:j + 1], data.labels[j:j + 1])[0]
        g_z = sample_gradients(spec, theta, X, y)[0]
        scores.append(float(_cosine(g_j @ g_z, np.linalg.norm(g_j), np.linalg.norm(g_z))))
    return EstimatorScoreSamples(Method.GC, (j, test_index), np.array(scores))


def tracin_scores(spec: ModelSpec, trajectories: dict[int, Sequence[np.ndarray]] | PosteriorSampleSet,
                  data: WeightedDataset, j: int, test_point, test_index: int = 0) -> EstimatorScoreSamples:
    """Grad-Dot averaged over each member's checkpoints: one score per member."""
    if isinstance(trajectories, PosteriorSampleSet):
        trajectories = {m: [s.params for s in group] for m, group in trajectories.by_member().items()}
    X, y = _point(test_point)
    scores = []
    for member in sorted(trajectories):
        checkpoints = trajectories[member]
        if len(checkpoints) < 1:
            raise ValueError(f"member {member} has no checkpoints")
        dots = []
        for theta in checkpoints:
            g_j = sample_gradients(spec, theta, data.features[j:j + 1], data.labels[j:j + 1])[0]
            g_z = sample_gradients(spec, theta, X, y)[0]
            dots.append(float(g_j @ g_z))
        scores.append(float(np.mean(dots)))
    return EstimatorScoreSamples(Method.TRACIN, (j, test_index), np.array(scores))


# --------------------------------------------------------------------------
# All-pairs tables
# --------------------------------------------------------------------------

def test_loss_table(spec: ModelSpec, sample_set: PosteriorSampleSet, X_test, y_test) -> np.ndarray:
    """Test losses under each sample (sorted by key); shape ``(T, n_test)``."""
    return sample_losses(spec, _ordered_params(sample_set), X_test, y_test)


test_loss_table.__test__ = False  # keep pytest from collecting it


def loo_tables(spec: ModelSpec, original: PosteriorSampleSet, counterfactuals: dict[int, PosteriorSampleSet],
               X_test, y_test) -> tuple[np.ndarray, np.ndarray]:
    """Cached test losses: original ``(T, n_test)`` and counterfactual ``(N, T, n_test)``.

    The LOO matrix for pair ``(j, z)`` is ``cf[j, :, z, None] - orig[None, :, z]``.
    """
    orig = test_loss_table(spec, original, X_test, y_test)
    keys = sorted(s.key for s in original.samples)
    cf = []
    for j in sorted(counterfactuals):
        if sorted(s.key for s in counterfactuals[j].samples) != keys:
            matched_pairs(original, counterfactuals[j])  # raises with a useful message
        cf.append(test_loss_table(spec, counterfactuals[j], X_test, y_test))
    return orig, np.stack(cf)


def estimator_tables(
    spec: ModelSpec,
    original: PosteriorSampleSet,
    data: WeightedDataset,
    X_test,
    y_test,
    config: TrainConfig,
    methods: Iterable[Method | str] = (Method.ATS, Method.IF, Method.GD, Method.GC, Method.TRACIN),
    damping: float = 0.005,
    solver: str = "Dense",
    include_l2: bool = True,
) -> dict[Method, np.ndarray]:
    """Scores for every (train, test) pair; each table has shape ``(n_samples, N_train, n_test)``.

    Per-sample methods have ``T`` samples in key order; TracIn has one per member.
    """
    methods = {Method(m) for m in methods} - {Method.LOO}
    X_test = np.asarray(X_test, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.int64)
    ordered = sorted(original.samples, key=lambda s: s.key)
    Xtr, ytr = data.features, data.labels
    lr = config.learning_rate
    out: dict[Method, list] = {m: [] for m in methods}
    gd_rows = []
    for s in ordered:
        theta = s.params
        G_tr = sample_gradients(spec, theta, Xtr, ytr)
        G_te = sample_gradients(spec, theta, X_test, y_test)
        gd = G_tr @ G_te.T
        gd_rows.append(gd)
        if Method.GD in methods:
            out[Method.GD].append(gd)
        if Method.GC in methods:
            out[Method.GC].append(_cosine(gd, np.linalg.norm(G_tr, axis=1)[:, None],
                                          np.linalg.norm(G_te, axis=1)[None, :]))
        if Method.IF in methods:
            x, ok = _damped_solve(spec, theta, data, G_tr.T, damping, solver, None, include_l2)
            if not ok:
                log.warning("CG did not converge for sample %s", s.key)
            out[Method.IF].append(-(G_te @ x).T)
        if Method.ATS in methods:
            theta_plus = theta[None, :] - lr * (G_tr + spec.l2_coefficient * theta[None, :])
            base = sample_losses(spec, theta, X_test, y_test)
            out[Method.ATS].append(sample_losses(spec, theta_plus, X_test, y_test) - base[None, :])
    tables = {m: np.stack(v) for m, v in out.items() if m is not Method.TRACIN}
    if Method.TRACIN in methods:
        gd_all = np.stack(gd_rows)
        members = [s.member_id for s in ordered]
        tables[Method.TRACIN] = np.stack([
            gd_all[[i for i, m in enumerate(members) if m == member]].mean(axis=0)
            for member in sorted(set(members))
        ])
    return tables


def write_scores_csv(path: str | Path, table: np.ndarray) -> None:
    """Score dump with columns ``train_index, test_index, sample_id, score``."""
    S, N, M = table.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_index", "test_index", "sample_id", "score"])
        for j in range(N):
            for z in range(M):
                for s in range(S):
                    w.writerow([j, z, s, repr(float(table[s, j, z]))])
