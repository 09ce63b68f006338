"""Dense linear algebra, counter-based randomness and Student-t tail probabilities.

Matrices are plain 2-D float64 numpy arrays; there is no wrapper type.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from .errors import DomainError, NonFiniteEncountered, NotPositiveDefinite

PIVOT_THRESHOLD = 1e-12
_MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# Randomness
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Handle on a Philox stream keyed by ``(seed, stream_id)``.

    The stream is immutable; ``generator()`` returns a fresh numpy Generator
    positioned at ``counter`` blocks into the stream, so two handles with the
    same fields always yield the same numbers no matter what else has run.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        bitgen = np.random.Philox(key=key)
        if self.counter:
            bitgen = bitgen.advance(self.counter)
        return np.random.Generator(bitgen)

    def child(self, stream_id: int) -> "RngStream":
        return replace(self, stream_id=stream_id, counter=0)


def derive_seed(master: int, label: str, index: int) -> int:
    """64-bit seed from BLAKE2b-64 over the UTF-8 text ``"{master}|{label}|{index}"``."""
    text = f"{int(master)}|{label}|{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def is_symmetric(a: np.ndarray, tol: float = 1e-10) -> bool:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    return bool(np.all(np.abs(a - a.T) <= tol * np.maximum(1.0, np.abs(a))))


def solve_spd(a: np.ndarray, b: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    Raises NotPositiveDefinite when a squared pivot is <= 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs has leading dimension {b.shape[0]}, matrix is {a.shape[0]}")
    if not is_symmetric(a, sym_tol):
        raise ValueError("matrix is not symmetric within tolerance")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NonFiniteEncountered("non-finite entry in linear system")
    try:
        chol = scipy.linalg.cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{exc}; increase the damping") from None
    pivots = np.diag(chol) ** 2
    if np.any(pivots <= PIVOT_THRESHOLD):
        k = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"pivot {pivots[k]:.3e} at index {k}; increase the damping")
    return scipy.linalg.cho_solve((chol, True), b, check_finite=False)


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def conjugate_gradient(
    hvp: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> CGResult:
    """Matrix-free CG for ``A x = b`` where ``hvp(v)`` returns ``A v`` (damping included).

    Stops once ``||A x - b|| <= tol * ||b||``. If ``max_iter`` runs out the
    iterate with the smallest residual seen so far is returned, flagged as
    not converged.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(x, True, 0, 0.0)
    target = tol * b_norm

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    best_x, best_res = x.copy(), math.sqrt(rs)
    for it in range(1, max_iter + 1):
        ap = np.asarray(hvp(p), dtype=np.float64)
        curvature = float(p @ ap)
        if not math.isfinite(curvature):
            raise NonFiniteEncountered(f"non-finite curvature at CG iteration {it}")
        if curvature <= 0.0:
            # operator not PD along p; keep the best iterate
            return CGResult(best_x, False, it, best_res)
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * ap
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise NonFiniteEncountered(f"non-finite CG iterate at iteration {it}")
        rs_new = float(r @ r)
        res = math.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= target:
            # recursive residual drifts; confirm against the true one
            true_res = float(np.linalg.norm(b - hvp(x)))
            if true_res <= target:
                return CGResult(x, True, it, true_res)
            r = b - hvp(x)
            rs_new = float(r @ r)
            p = r.copy()
            rs = rs_new
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(best_x, False, max_iter, best_res)


# --------------------------------------------------------------------------
# Special functions
# --------------------------------------------------------------------------

def ln_gamma(x: float) -> float:
    if not math.isfinite(x) or x <= 0:
        raise DomainError(f"ln_gamma requires a finite positive argument, got {x}")
    return math.lgamma(x)


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation
    tiny = 1e-300
    eps = 3e-16
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 100_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0 and b > 0):
        raise DomainError("incomplete beta requires a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"incomplete beta argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_p_two_sided(t_stat: float, dof: int) -> float:
    """P(|T| >= |t_stat|) for a Student-t variable with ``dof`` degrees of freedom."""
    if dof < 1:
        raise DomainError(f"dof must be >= 1, got {dof}")
    if not math.isfinite(t_stat):
        raise DomainError(f"t statistic must be finite, got {t_stat}")
    if t_stat == 0.0:
        return 1.0
    t2 = t_stat * t_stat
    x = dof / (dof + t2)
    if x == 1.0:
        # t^2 underflows against dof; fall back to the complementary form
        return 1.0 - regularized_incomplete_beta(t2 / (dof + t2), 0.5, dof / 2.0)
    p = regularized_incomplete_beta(x, dof / 2.0, 0.5)
    return min(1.0, max(0.0, p))
