"""Moments, significance tests and cross-method correlation of attribution distributions.

LOO pairs use the cross-pair convention: the mean comes from the T matched
differences, the variance from all T^2 (counterfactual, original) pairings,
and the t-test treats those T^2 values as the sample (dof T^2 - 1). The
cross-pairs are not independent, so the resulting p-values rank pairs by
noise level; they are not calibrated error rates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateSampleCount, DomainError, ZeroVarianceInput
from .numeric import student_t_p_two_sided

log = logging.getLogger(__name__)

LOW_NOISE_THRESHOLD = 0.05


class Statistic(str, Enum):
    MEAN = "Mean"
    STD = "StdDev"
    PVALUE = "PValue"


@dataclass(frozen=True)
class PairStatistics:
    pair: tuple[int, int]
    method: str
    mean: float
    variance: float
    sample_variance: float
    t_stat: float
    p_value: float
    n_samples: int
    degenerate: bool = False

    @property
    def std(self) -> float:
        return math.sqrt(self.variance) if self.variance == self.variance else float("nan")

    def value(self, statistic: Statistic) -> float:
        statistic = Statistic(statistic)
        if statistic is Statistic.MEAN:
            return self.mean
        if statistic is Statistic.STD:
            return self.std
        return self.p_value


# --------------------------------------------------------------------------
# Moments
# --------------------------------------------------------------------------

def _values(matrix) -> np.ndarray:
    values = getattr(matrix, "values", matrix)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 2 or values.shape[-1] != values.shape[-2]:
        raise ValueError("expected a square T x T matrix (optionally stacked)")
    return values


def loo_mean(matrix) -> float | np.ndarray:
    """Mean of the matched (diagonal) differences; accepts stacks ``(..., T, T)``."""
    v = _values(matrix)
    out = np.diagonal(v, axis1=-2, axis2=-1).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def loo_variance(matrix, sample_corrected: bool = False) -> float | np.ndarray:
    """Mean squared deviation of all T^2 cross-pair differences from the matched mean.

    With ``sample_corrected`` the denominator is ``T^2 - 1``.
    """
    v = _values(matrix)
    T = v.shape[-1]
    n = T * T
    if sample_corrected and n <= 1:
        raise DegenerateSampleCount("sample variance needs T >= 2")
    mu = np.diagonal(v, axis1=-2, axis2=-1).mean(axis=-1)
    ss = ((v - mu[..., None, None]) ** 2).sum(axis=(-2, -1))
    out = ss / (n - 1 if sample_corrected else n)
    return float(out) if out.ndim == 0 else out


def estimator_moments(samples) -> tuple[float, float, float]:
    """(mean, population variance, sample variance) of one method's per-sample scores."""
    x = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise DegenerateSampleCount(f"need at least 2 samples, got {n}")
    mean = x.mean(axis=-1)
    ss = ((x - mean[..., None]) ** 2).sum(axis=-1)
    if x.ndim == 1:
        return float(mean), float(ss / n), float(ss / (n - 1))
    return mean, ss / n, ss / (n - 1)


def significance_test(mean: float, sample_variance: float, n_effective: int) -> tuple[float, float]:
    """Two-sided one-sample t-test of H0: mean = 0, with dof ``n_effective - 1``."""
    if n_effective < 2:
        raise DegenerateSampleCount(f"t-test needs n_effective >= 2, got {n_effective}")
    if sample_variance < 0 or not math.isfinite(sample_variance) or not math.isfinite(mean):
        raise DomainError("mean and variance must be finite, variance non-negative")
    if sample_variance == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(sample_variance / n_effective)
    return t, student_t_p_two_sided(t, n_effective - 1)


def _degenerate(pair, method, mean, variance, n):
    return PairStatistics(pair, method, mean, variance, float("nan"), float("nan"), float("nan"), n, True)


def loo_pair_statistics(matrix, pair=(0, 0)) -> PairStatistics:
    v = _values(matrix)
    T = v.shape[-1]
    mean = loo_mean(v)
    var = loo_variance(v)
    if T < 2:
        return _degenerate(pair, "LOO", mean, var, T * T)
    svar = loo_variance(v, sample_corrected=True)
    t, p = significance_test(mean, svar, T * T)
    return PairStatistics(pair, "LOO", mean, var, svar, t, p, T * T)


def estimator_pair_statistics(samples, method: str, pair=(0, 0)) -> PairStatistics:
    x = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return _degenerate(pair, method, float(x.mean()) if n else float("nan"), float("nan"), n)
    mean, var, svar = estimator_moments(x)
    t, p = significance_test(mean, svar, n)
    return PairStatistics(pair, method, mean, var, svar, t, p, n)


def loo_statistics_table(orig_losses: np.ndarray, cf_losses: np.ndarray) -> list[PairStatistics]:
    """Pair statistics for every (j, z) from cached test losses.

    ``orig_losses`` is ``(T, n_test)``, ``cf_losses`` is ``(N, T, n_test)``.
    Pairs are emitted in (j, z) order.
    """
    out = []
    for j in range(cf_losses.shape[0]):
        # (n_test, T, T) stack of matrices for train index j
        mats = cf_losses[j].T[:, :, None] - orig_losses.T[:, None, :]
        for z in range(mats.shape[0]):
            out.append(loo_pair_statistics(mats[z], (j, z)))
    return out


def estimator_statistics_table(table: np.ndarray, method: str) -> list[PairStatistics]:
    """``table`` has shape ``(n_samples, N, n_test)``; pairs in (j, z) order."""
    out = []
    for j in range(table.shape[1]):
        for z in range(table.shape[2]):
            out.append(estimator_pair_statistics(table[:, j, z], method, (j, z)))
    return out


# --------------------------------------------------------------------------
# Correlations
# --------------------------------------------------------------------------

def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceInput("correlation undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(xs) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        k = i
        while k + 1 < x.size and sorted_x[k + 1] == sorted_x[i]:
            k += 1
        ranks[order[i:k + 1]] = 0.5 * (i + k) + 1.0
        i = k + 1
    return ranks


def spearman(xs, ys) -> float:
    return pearson(average_ranks(xs), average_ranks(ys))


@dataclass
class CorrelationReport:
    statistic: Statistic
    methods: list[str]
    pearson: np.ndarray
    spearman: np.ndarray
    n_pairs: int

    def to_dict(self) -> dict:
        def clean(m):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in m]
        return {
            "statistic": self.statistic.value,
            "methods": list(self.methods),
            "n_pairs": self.n_pairs,
            "pearson": clean(self.pearson),
            "spearman": clean(self.spearman),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationReport":
        def load(m):
            return np.array([[np.nan if v is None else v for v in row] for row in m], dtype=np.float64)
        return cls(Statistic(d["statistic"]), list(d["methods"]), load(d["pearson"]), load(d["spearman"]), d["n_pairs"])


def build_correlation_report(stats: dict[str, Sequence[PairStatistics]] | Iterable[PairStatistics],
                             statistic: Statistic | str) -> CorrelationReport:
    """Method x method Pearson and Spearman matrices over one per-pair statistic.

    Pairs missing or undefined (NaN) for any method are dropped listwise.
    Cells whose inputs have zero variance are left as NaN.
    """
    statistic = Statistic(statistic)
    if not isinstance(stats, dict):
        grouped: dict[str, list[PairStatistics]] = {}
        for s in stats:
            grouped.setdefault(s.method, []).append(s)
        stats = grouped
    methods = list(stats)
    values = {m: {s.pair: s.value(statistic) for s in stats[m]} for m in methods}
    common = set.intersection(*(set(v) for v in values.values())) if methods else set()
    pairs = sorted(p for p in common if all(np.isfinite(values[m][p]) for m in methods))
    total = len(set.union(*(set(v) for v in values.values()))) if methods else 0
    if len(pairs) < total:
        log.info("correlation on %s: dropped %d of %d pairs listwise", statistic.value, total - len(pairs), total)
    cols = {m: np.array([values[m][p] for p in pairs]) for m in methods}
    k = len(methods)
    P = np.full((k, k), np.nan)
    S = np.full((k, k), np.nan)
    for a in range(k):
        for b in range(a, k):
            try:
                r = pearson(cols[methods[a]], cols[methods[b]])
                rho = spearman(cols[methods[a]], cols[methods[b]])
            except (ZeroVarianceInput, ValueError):
                continue
            if a == b:
                r = rho = 1.0
            P[a, b] = P[b, a] = r
            S[a, b] = S[b, a] = rho
    return CorrelationReport(statistic, methods, P, S, len(pairs))


def p_value_histogram(p_values, bins: int = 10) -> tuple[np.ndarray, float]:
    """Equal-width bin counts over [0, 1] (last bin closed) and the fraction with p < 0.05."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    p = np.asarray(p_values, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise DomainError("p-values must lie in [0, 1]")
    idx = np.minimum((p * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    fraction = float(np.mean(p < LOW_NOISE_THRESHOLD)) if p.size else 0.0
    return counts, fraction
