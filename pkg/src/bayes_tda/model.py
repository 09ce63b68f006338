"""Softmax classifiers with hand-written gradients and Hessian-vector products.

Two architectures share one flat parameter layout:

* ``LogisticRegression``: ``W`` (C x d, row-major) then ``b`` (C).
* ``MLP``: ``W1`` (H x d), ``b1`` (H), ``W2`` (C x H), ``b2`` (C), exact GeLU.

Parameters are float64 numpy vectors. Most functions also accept a stack of
parameter vectors with shape ``(K, P)``; the training loop uses that to run
the original and every leave-one-out variant of an ensemble member in
lockstep.

The training objective is ``sum_i w_i l_i / sum_i w_i + (l2 / 2) ||theta||^2``.
Hessian-vector products use the exact R-operator (forward-over-reverse),
not finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import NonFiniteLoss, ParamCountTooLarge

MAX_EXPLICIT_PARAMS = 2000
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ModelKind(str, Enum):
    LOGISTIC = "LogisticRegression"
    MLP = "MLP"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "GeLU"
    l2_coefficient: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be non-negative")
        if self.kind is ModelKind.MLP:
            if self.hidden_dim < 1:
                raise ValueError("MLP needs hidden_dim >= 1")
            if self.activation != "GeLU":
                raise ValueError(f"unsupported activation {self.activation!r}")
        elif self.hidden_dim != 0:
            raise ValueError("LogisticRegression must have hidden_dim = 0")

    @property
    def param_count(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind is ModelKind.LOGISTIC:
            return d * c + c
        return d * h + h + h * c + c

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) of each weight matrix, in parameter order."""
        if self.kind is ModelKind.LOGISTIC:
            return [(self.num_classes, self.input_dim)]
        return [(self.hidden_dim, self.input_dim), (self.num_classes, self.hidden_dim)]

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.param_count, dtype=bool)
        offset = 0
        for fan_out, fan_in in self.layer_shapes():
            offset += fan_out * fan_in
            mask[offset:offset + fan_out] = True
            offset += fan_out
        return mask

    def unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        """Split ``theta`` (shape ``(..., P)``) into [W, b, ...] views."""
        theta = np.asarray(theta)
        if theta.shape[-1] != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {theta.shape[-1]}")
        lead = theta.shape[:-1]
        out, offset = [], 0
        for fan_out, fan_in in self.layer_shapes():
            size = fan_out * fan_in
            out.append(theta[..., offset:offset + size].reshape(*lead, fan_out, fan_in))
            offset += size
            out.append(theta[..., offset:offset + fan_out])
            offset += fan_out
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "activation": self.activation,
            "l2_coefficient": self.l2_coefficient,
        }


def pack(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of ``ModelSpec.unpack`` for arrays sharing leading dimensions."""
    lead = parts[1].shape[:-1]
    return np.concatenate([p.reshape(*lead, -1) for p in parts], axis=-1)


@dataclass
class WeightedDataset:
    features: np.ndarray
    labels: np.ndarray
    loss_weights: np.ndarray = field(default=None)
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.loss_weights is None:
            self.loss_weights = np.ones(n)
        self.loss_weights = np.asarray(self.loss_weights, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if self.labels.shape != (n,) or self.loss_weights.shape != (n,):
            raise ValueError("labels and loss_weights must have one entry per sample")
        if np.isnan(self.features).any():
            raise ValueError("features contain NaN")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not np.all((self.loss_weights == 0.0) | (self.loss_weights == 1.0)):
            raise ValueError("loss weights must be 0 or 1")
        if self.loss_weights.sum() < 1:
            raise ValueError("dataset has no sample with nonzero weight")

    def __len__(self) -> int:
        return self.features.shape[0]

    def without(self, j: int) -> "WeightedDataset":
        """Copy with sample ``j``'s loss weight set to 0."""
        weights = self.loss_weights.copy()
        weights[j] = 0.0
        return replace(self, loss_weights=weights)


# --------------------------------------------------------------------------
# Activation
# --------------------------------------------------------------------------

def gelu(x):
    return x * ndtr(x)


def _gelu_derivatives(x):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    d1 = ndtr(x) + x * pdf
    d2 = pdf * (2.0 - x * x)
    return d1, d2


# --------------------------------------------------------------------------
# Forward / backward on raw arrays
# --------------------------------------------------------------------------

def _T(a):
    return np.swapaxes(a, -1, -2)


def _forward(spec: ModelSpec, theta, X):
    parts = spec.unpack(theta)
    if spec.kind is ModelKind.LOGISTIC:
        W, b = parts
        z = X @ _T(W) + b[..., None, :]
        return {"parts": parts, "logits": z}
    W1, b1, W2, b2 = parts
    z1 = X @ _T(W1) + b1[..., None, :]
    a1 = gelu(z1)
    z2 = a1 @ _T(W2) + b2[..., None, :]
    return {"parts": parts, "z1": z1, "a1": a1, "logits": z2}


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logits(spec: ModelSpec, theta, X) -> np.ndarray:
    return _forward(spec, theta, np.asarray(X, dtype=np.float64))["logits"]


def sample_losses(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """Unweighted cross-entropy per sample; shape ``(..., n)`` for ``theta`` of shape ``(..., P)``."""
    z = logits(spec, theta, X)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLoss("non-finite logits")
    logp = _log_softmax(z)
    y = np.asarray(y)
    loss = -np.take_along_axis(logp, np.broadcast_to(y[:, None], logp.shape[:-1] + (1,)), axis=-1)[..., 0]
    if not np.all(np.isfinite(loss)):
        raise NonFiniteLoss("non-finite loss")
    return loss


def _softmax_and_onehot(spec, z, y):
    p = np.exp(_log_softmax(z))
    onehot = np.zeros(z.shape[-2:])
    onehot[np.arange(len(y)), y] = 1.0
    return p, onehot


def weighted_gradient_sum(spec: ModelSpec, theta, X, y, w) -> np.ndarray:
    """``sum_i w_i grad l_i`` with no normalization and no L2 term.

    ``w`` has shape ``(n,)`` or ``(K, n)`` matching a stacked ``theta``.
    """
    X = np.asarray(X, dtype=np.float64)
    cache = _forward(spec, theta, X)
    z = cache["logits"]
    if not np.all(np.isfinite(z)):
        raise NonFiniteLoss("non-finite logits")
    p, onehot = _softmax_and_onehot(spec, z, np.asarray(y))
    delta = (p - onehot) * np.asarray(w)[..., :, None]
    if spec.kind is ModelKind.LOGISTIC:
        return pack([_T(delta) @ X, delta.sum(axis=-2)])
    W1, b1, W2, b2 = cache["parts"]
    g_W2 = _T(delta) @ cache["a1"]
    g_b2 = delta.sum(axis=-2)
    d1, _ = _gelu_derivatives(cache["z1"])
    delta1 = (delta @ W2) * d1
    g_W1 = _T(delta1) @ X
    g_b1 = delta1.sum(axis=-2)
    return pack([g_W1, g_b1, g_W2, g_b2])


def objective_gradient(spec: ModelSpec, theta, X, y, w) -> np.ndarray:
    """Gradient of the weight-normalized mean loss plus L2.

    A row whose weights are all zero gets only the L2 term.
    """
    theta = np.asarray(theta, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum(axis=-1, keepdims=True)
    coef = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    return weighted_gradient_sum(spec, theta, X, y, coef) + spec.l2_coefficient * theta


def sample_gradients(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """Per-sample loss gradients (no L2) for a single ``theta``; shape ``(n, P)``."""
    X = np.asarray(X, dtype=np.float64)
    cache = _forward(spec, theta, X)
    z = cache["logits"]
    if not np.all(np.isfinite(z)):
        raise NonFiniteLoss("non-finite logits")
    p, onehot = _softmax_and_onehot(spec, z, np.asarray(y))
    delta = p - onehot
    n = X.shape[0]
    if spec.kind is ModelKind.LOGISTIC:
        g_W = delta[:, :, None] * X[:, None, :]
        return np.concatenate([g_W.reshape(n, -1), delta], axis=1)
    W1, b1, W2, b2 = cache["parts"]
    a1 = cache["a1"]
    g_W2 = delta[:, :, None] * a1[:, None, :]
    d1, _ = _gelu_derivatives(cache["z1"])
    delta1 = (delta @ W2) * d1
    g_W1 = delta1[:, :, None] * X[:, None, :]
    return np.concatenate([g_W1.reshape(n, -1), delta1, g_W2.reshape(n, -1), delta], axis=1)


def objective_hvp(spec: ModelSpec, theta, X, y, w, V) -> np.ndarray:
    """Hessian of the training objective at ``theta`` applied to ``V``.

    ``V`` is one direction ``(P,)`` or a stack ``(m, P)``; the result has the
    same shape. Includes the L2 curvature ``l2 * V``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    single = V.ndim == 1
    if single:
        V = V[None, :]
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    coef = w / total if total > 0 else np.zeros_like(w)

    cache = _forward(spec, theta, X)
    z = cache["logits"]
    if not np.all(np.isfinite(z)):
        raise NonFiniteLoss("non-finite logits")
    p, onehot = _softmax_and_onehot(spec, z, y)
    delta = p - onehot                                   # (n, C)
    dirs = spec.unpack(V)                                # stacked over m

    def r_softmax(rz):
        # Jacobian of softmax applied to rz, per sample
        return p * rz - p * (p * rz).sum(axis=-1, keepdims=True)

    if spec.kind is ModelKind.LOGISTIC:
        VW, vb = dirs
        rz = X @ _T(VW) + vb[:, None, :]                 # (m, n, C)
        rdelta = r_softmax(rz) * coef[:, None]
        out = pack([_T(rdelta) @ X, rdelta.sum(axis=-2)])
    else:
        W1, b1, W2, b2 = cache["parts"]
        V1, c1, V2, c2 = dirs
        z1, a1 = cache["z1"], cache["a1"]
        d1, d2 = _gelu_derivatives(z1)
        rz1 = X @ _T(V1) + c1[:, None, :]                # (m, n, H)
        ra1 = d1 * rz1
        rz2 = a1 @ _T(V2) + ra1 @ W2.T + c2[:, None, :]  # (m, n, C)
        rdelta = r_softmax(rz2)
        wdelta = delta * coef[:, None]
        wrdelta = rdelta * coef[:, None]
        r_gW2 = _T(wrdelta) @ a1 + wdelta.T @ ra1
        r_gb2 = wrdelta.sum(axis=-2)
        da1 = wdelta @ W2                                 # (n, H)
        r_da1 = wdelta @ V2 + wrdelta @ W2                # (m, n, H)
        r_delta1 = d2 * rz1 * da1 + d1 * r_da1
        r_gW1 = _T(r_delta1) @ X
        r_gb1 = r_delta1.sum(axis=-2)
        out = pack([r_gW1, r_gb1, r_gW2, r_gb2])
    out = out + spec.l2_coefficient * V
    return out[0] if single else out


# --------------------------------------------------------------------------
# Dataset-level API
# --------------------------------------------------------------------------

def _select(data: WeightedDataset, indices):
    if indices is None:
        return data.features, data.labels, data.loss_weights
    idx = np.asarray(indices, dtype=np.int64)
    return data.features[idx], data.labels[idx], data.loss_weights[idx]


def per_sample_losses(spec: ModelSpec, params, data: WeightedDataset, indices=None) -> np.ndarray:
    """Cross-entropy of each listed sample; loss weights and L2 are not applied."""
    X, y, _ = _select(data, indices)
    return sample_losses(spec, params, X, y)


def loss_gradient(spec: ModelSpec, params, data: WeightedDataset, indices=None) -> np.ndarray:
    X, y, w = _select(data, indices)
    return objective_gradient(spec, params, X, y, w)


def hessian_vector_product(spec: ModelSpec, params, data: WeightedDataset, v, indices=None) -> np.ndarray:
    X, y, w = _select(data, indices)
    return objective_hvp(spec, params, X, y, w, v)


def explicit_hessian(spec: ModelSpec, params, data: WeightedDataset, indices=None) -> np.ndarray:
    """Dense Hessian whose k-th column is the HVP with the k-th unit vector."""
    P = spec.param_count
    if P > MAX_EXPLICIT_PARAMS:
        raise ParamCountTooLarge(f"{P} parameters exceeds the dense limit of {MAX_EXPLICIT_PARAMS}")
    X, y, w = _select(data, indices)
    # rows of HVP(I) are H e_k = column k
    return objective_hvp(spec, params, X, y, w, np.eye(P)).T
