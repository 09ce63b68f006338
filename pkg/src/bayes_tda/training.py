"""Deterministic mini-batch training, checkpoint capture and the extra-step (ATS) update.

Batch order depends only on ``(batch_seed, epoch)``, never on loss weights,
so a run on the full data and a run with sample ``j`` weight-zeroed visit
identical batches. ``train_variants`` exploits this to train the original and
any number of weight-zeroed variants of one ensemble member in lockstep.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergedTraining, NonFiniteLoss
from .model import (
    ModelKind,
    ModelSpec,
    WeightedDataset,
    explicit_hessian,
    objective_gradient,
    sample_gradients,
    sample_losses,
)
from .numeric import NotPositiveDefinite, RngStream, solve_spd

CHECKPOINT_MAGIC = b"BTDA"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "Adam"
    learning_rate: float = 0.001
    weight_decay: float = 0.005
    batch_size: int = 32
    epochs: int = 15
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    swa_window: int = 5
    ats_uses_optimizer_state: bool = False

    def __post_init__(self):
        if self.optimizer not in ("SGD", "Adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.epochs >= self.swa_window >= 1:
            raise ConfigError("need epochs >= swa_window >= 1")
        if self.ats_uses_optimizer_state:
            raise ConfigError("ATS with optimizer state is not supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrajectory:
    init_seed: int
    batch_seed: int
    checkpoints: list[tuple[int, np.ndarray]]
    final_params: np.ndarray
    final_train_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def initialize_params(spec: ModelSpec, rng: RngStream) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator()
    parts = []
    for fan_out, fan_in in spec.layer_shapes():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        parts.append(gen.uniform(-limit, limit, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def shuffle_epoch(n: int, epoch: int, rng: RngStream) -> np.ndarray:
    """Permutation of ``range(n)`` for one epoch; depends on ``(rng.seed, epoch)`` only."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = RngStream(rng.seed, stream_id=epoch).generator()
    perm = np.arange(n)
    # Fisher-Yates, drawing from the top down
    for i in range(n - 1, 0, -1):
        k = int(gen.integers(0, i + 1))
        perm[i], perm[k] = perm[k], perm[i]
    return perm


def _check_l2(spec: ModelSpec, config: TrainConfig):
    if spec.l2_coefficient != config.weight_decay:
        raise ConfigError(
            f"model l2_coefficient ({spec.l2_coefficient}) must equal the training "
            f"weight_decay ({config.weight_decay}); weight decay is the objective's L2 term"
        )


def train_variants(
    spec: ModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    config: TrainConfig,
    init_seed: int,
    batch_seed: int,
    init_override: np.ndarray | None = None,
) -> list[TrainTrajectory]:
    """Train one parameter vector per row of ``weights`` (shape ``(K, N)``) on shared batches.

    Every row starts from the same initialization and sees the same batch
    sequence; rows only differ in which samples carry weight.
    """
    _check_l2(spec, config)
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    K, N = W.shape
    if N != X.shape[0]:
        raise ValueError("weights do not match the number of samples")
    if np.any(W.sum(axis=1) < 1):
        raise ValueError("every weight row needs at least one nonzero entry")

    if init_override is not None:
        theta0 = np.asarray(init_override, dtype=np.float64)
        if theta0.shape != (spec.param_count,):
            raise ValueError("init_override does not match the model spec")
    else:
        theta0 = initialize_params(spec, RngStream(init_seed, 0))
    theta = np.repeat(theta0[None, :], K, axis=0)

    adam = config.optimizer == "Adam"
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, bs = config.learning_rate, config.batch_size
    batch_rng = RngStream(batch_seed)

    first_ckpt_epoch = config.epochs - config.swa_window + 1
    checkpoints: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(K)]
    epoch_losses = np.zeros((config.epochs, K))
    total = W.sum(axis=1)
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_epoch(N, epoch, batch_rng)
        for start in range(0, N, bs):
            idx = perm[start:start + bs]
            try:
                grad = objective_gradient(spec, theta, X[idx], y[idx], W[:, idx])
            except NonFiniteLoss:
                raise DivergedTraining(f"non-finite logits during epoch {epoch}") from None
            step += 1
            if adam:
                m = b1 * m + (1.0 - b1) * grad
                v = b2 * v + (1.0 - b2) * grad * grad
                m_hat = m / (1.0 - b1 ** step)
                v_hat = v / (1.0 - b2 ** step)
                theta = theta - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            else:
                theta = theta - lr * grad
        try:
            losses = sample_losses(spec, theta, X, y)
        except NonFiniteLoss:
            raise DivergedTraining(f"non-finite training loss after epoch {epoch}") from None
        epoch_losses[epoch - 1] = (W * losses).sum(axis=1) / total
        if epoch >= first_ckpt_epoch:
            for k in range(K):
                checkpoints[k].append((epoch, theta[k].copy()))

    out = []
    for k in range(K):
        final_loss = float(epoch_losses[-1, k])
        out.append(TrainTrajectory(
            init_seed=init_seed,
            batch_seed=batch_seed,
            checkpoints=checkpoints[k],
            final_params=theta[k].copy(),
            final_train_loss=final_loss,
            epoch_losses=[float(x) for x in epoch_losses[:, k]],
        ))
    return out


def train(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    init_seed: int,
    batch_seed: int,
    init_override: np.ndarray | None = None,
) -> TrainTrajectory:
    return train_variants(
        spec, data.features, data.labels, data.loss_weights[None, :],
        config, init_seed, batch_seed, init_override,
    )[0]


def ats_step(
    spec: ModelSpec,
    params: np.ndarray,
    data: WeightedDataset,
    j: int,
    config: TrainConfig,
    learning_rate: float | None = None,
) -> np.ndarray:
    """One stateless gradient step on sample ``j`` alone: ``theta - lr * (grad l_j + l2 * theta)``."""
    lr = config.learning_rate if learning_rate is None else learning_rate
    params = np.asarray(params, dtype=np.float64)
    g = sample_gradients(spec, params, data.features[j:j + 1], data.labels[j:j + 1])[0]
    return params - lr * (g + spec.l2_coefficient * params)


def fit_to_convergence(
    spec: ModelSpec,
    data: WeightedDataset,
    init: np.ndarray | None = None,
    grad_tol: float = 1e-8,
    max_iter: int = 100,
) -> np.ndarray:
    """Full-batch damped Newton on the training objective until ``||grad|| <= grad_tol``.

    Meant for convex (L2-regularized logistic) problems where an exact
    minimizer is needed, e.g. as a retraining oracle.
    """
    if spec.kind is not ModelKind.LOGISTIC and spec.l2_coefficient == 0:
        raise ValueError("Newton fitting needs a strictly convex objective")
    theta = np.zeros(spec.param_count) if init is None else np.asarray(init, dtype=np.float64).copy()
    X, y, w = data.features, data.labels, data.loss_weights

    def objective(t):
        return float(w @ sample_losses(spec, t, X, y)) / w.sum() + 0.5 * spec.l2_coefficient * float(t @ t)

    f = objective(theta)
    for _ in range(max_iter):
        g = objective_gradient(spec, theta, X, y, w)
        if np.linalg.norm(g) <= grad_tol:
            return theta
        H = explicit_hessian(spec, theta, data)
        try:
            step = solve_spd(0.5 * (H + H.T), g)
        except NotPositiveDefinite:
            step = g
        g_norm = np.linalg.norm(g)
        t = 1.0
        while True:
            cand = theta - t * step
            f_cand = objective(cand)
            if f_cand <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            # near the optimum the decrease drops below float resolution of f
            if np.linalg.norm(objective_gradient(spec, cand, X, y, w)) < 0.5 * g_norm:
                break
            t *= 0.5
        theta, f = cand, f_cand
    g = objective_gradient(spec, theta, X, y, w)
    if np.linalg.norm(g) > grad_tol:
        raise DivergedTraining(f"Newton did not reach gradient norm {grad_tol} (got {np.linalg.norm(g):.3e})")
    return theta


def write_checkpoint(path: str | Path, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.size))
        fh.write(params.tobytes())


def read_checkpoint(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: expected {count} parameters, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)
