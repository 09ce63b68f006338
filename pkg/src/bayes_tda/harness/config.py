"""Experiment configuration and its flat ``key = value  # unit`` file format.

Values are JSON literals, so floats round-trip exactly through ``repr``.
The model's L2 coefficient is not a separate key: it always equals
``training.weight_decay``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..attribution import ALL_METHODS, Method
from ..errors import ConfigError
from ..model import ModelKind, ModelSpec
from ..posterior import RandomnessRegime
from ..training import TrainConfig
from .data import BlobsConfig


@dataclass(frozen=True)
class IdxConfig:
    image_path: str = ""
    label_path: str = ""
    per_class: int = 50
    test_per_class: int = 300
    downscale: int = 2
    classes: tuple[int, ...] = (0, 1, 2)
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "Blobs"
    blobs: BlobsConfig = field(default_factory=BlobsConfig)
    idx: IdxConfig = field(default_factory=IdxConfig)
    model_kind: str = "MLP"
    hidden_dim: int = 16
    training: TrainConfig = field(default_factory=TrainConfig)
    regime: RandomnessRegime = field(default_factory=RandomnessRegime)
    methods: tuple[str, ...] = tuple(m.value for m in ALL_METHODS)
    if_damping: float = 0.005
    if_solver: str = "Dense"
    hessian_includes_l2: bool = True
    dump_scores: bool = False
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.dataset not in ("Blobs", "IdxFile"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.if_solver not in ("Dense", "CG"):
            raise ConfigError(f"unknown IF solver {self.if_solver!r}")
        if not self.if_damping >= 0:
            raise ConfigError("if_damping must be >= 0")
        try:
            methods = tuple(Method(m).value for m in self.methods)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "methods", methods)
        ModelKind(self.model_kind)

    @property
    def loo_sweep(self) -> bool:
        return Method.LOO.value in self.methods

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        kind = ModelKind(self.model_kind)
        return ModelSpec(
            kind=kind,
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_dim=self.hidden_dim if kind is ModelKind.MLP else 0,
            l2_coefficient=self.training.weight_decay,
        )

    def train_size(self) -> int:
        if self.dataset == "Blobs":
            b = self.blobs
            return b.train_size or b.classes * b.train_per_class
        return self.idx.per_class * len(self.idx.classes)

    def training_runs(self) -> int:
        """Number of training runs a full experiment implies."""
        return self.regime.t_de * ((self.train_size() + 1) if self.loo_sweep else 1)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        return replace(self, **sections)


# key, unit comment, section attribute, field name
_SCHEMA = [
    ("dataset.kind", "Blobs | IdxFile", None, "dataset"),
    ("blobs.classes", "count", "blobs", "classes"),
    ("blobs.train_per_class", "samples per class (ignored when train_size > 0)", "blobs", "train_per_class"),
    ("blobs.test_per_class", "samples per class (ignored when test_size > 0)", "blobs", "test_per_class"),
    ("blobs.train_size", "samples, labels cycle over classes; 0 = use per-class count", "blobs", "train_size"),
    ("blobs.test_size", "samples; 0 = use per-class count", "blobs", "test_size"),
    ("blobs.dim", "feature dimensions", "blobs", "dim"),
    ("blobs.separation", "distance between adjacent class centers, feature units", "blobs", "separation"),
    ("blobs.sigma", "per-coordinate noise std, feature units", "blobs", "sigma"),
    ("blobs.data_seed", "integer seed", "blobs", "data_seed"),
    ("idx.image_path", "path to IDX3 image file", "idx", "image_path"),
    ("idx.label_path", "path to IDX1 label file", "idx", "label_path"),
    ("idx.per_class", "train samples per class", "idx", "per_class"),
    ("idx.test_per_class", "test samples per class", "idx", "test_per_class"),
    ("idx.downscale", "average-pool factor, pixels", "idx", "downscale"),
    ("idx.classes", "list of label values kept", "idx", "classes"),
    ("idx.seed", "integer seed for subsampling", "idx", "seed"),
    ("model.kind", "LogisticRegression | MLP", None, "model_kind"),
    ("model.hidden_dim", "units (MLP only)", None, "hidden_dim"),
    ("training.optimizer", "SGD | Adam", "training", "optimizer"),
    ("training.learning_rate", "step size per update", "training", "learning_rate"),
    ("training.weight_decay", "L2 coefficient in the objective, also the model's L2", "training", "weight_decay"),
    ("training.batch_size", "samples per batch", "training", "batch_size"),
    ("training.epochs", "passes over the training set", "training", "epochs"),
    ("training.adam_beta1", "dimensionless", "training", "adam_beta1"),
    ("training.adam_beta2", "dimensionless", "training", "adam_beta2"),
    ("training.adam_eps", "dimensionless", "training", "adam_eps"),
    ("training.swa_window", "epoch-end checkpoints kept", "training", "swa_window"),
    ("regime.kind", "DEInit | DEBatch", "regime", "kind"),
    ("regime.t_de", "ensemble members", "regime", "t_de"),
    ("regime.t_swa", "checkpoints per member used as samples", "regime", "t_swa"),
    ("regime.master_seed", "integer seed", "regime", "master_seed"),
    ("regime.pin_batch_seed", "DEInit only: share one batch order across members", "regime", "pin_batch_seed"),
    ("methods", "subset of LOO, ATS, IF, GD, GC, TracIn; LOO triggers the full retraining sweep", None, "methods"),
    ("attribution.if_damping", "added to the Hessian diagonal", None, "if_damping"),
    ("attribution.if_solver", "Dense | CG", None, "if_solver"),
    ("attribution.hessian_includes_l2", "true = Hessian of the full training objective", None, "hessian_includes_l2"),
    ("output.dump_scores", "write per-method score CSVs", None, "dump_scores"),
    ("output.dir", "directory for reports and checkpoints", None, "output_dir"),
]


def _jsonable(value):
    if hasattr(value, "value"):  # enums
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


def to_flat(config: ExperimentConfig) -> dict:
    flat = {}
    for key, _, section, name in _SCHEMA:
        obj = getattr(config, section) if section else config
        flat[key] = _jsonable(getattr(obj, name))
    return flat


def from_flat(flat: dict) -> ExperimentConfig:
    known = {key for key, *_ in _SCHEMA}
    unknown = set(flat) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = ExperimentConfig()
    sections: dict[str, dict] = {"blobs": {}, "idx": {}, "training": {}, "regime": {}}
    top = {}
    for key, _, section, name in _SCHEMA:
        if key not in flat:
            continue
        value = flat[key]
        if isinstance(value, list):
            value = tuple(value)
        if section:
            sections[section][name] = value
        else:
            top[name] = value
    try:
        return replace(
            base,
            blobs=replace(base.blobs, **sections["blobs"]),
            idx=replace(base.idx, **sections["idx"]),
            training=replace(base.training, **sections["training"]),
            regime=replace(base.regime, **sections["regime"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dumps(config: ExperimentConfig) -> str:
    lines = ["# bayes-tda experiment configuration", "# key = JSON value  # unit / meaning", ""]
    flat = to_flat(config)
    width = max(len(k) for k in flat)
    for key, unit, _, _ in _SCHEMA:
        lines.append(f"{key.ljust(width)} = {json.dumps(flat[key])}  # {unit}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    decoder = json.JSONDecoder()
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, rest = line.split("=", 1)
        key, rest = key.strip(), rest.strip()
        try:
            value, end = decoder.raw_decode(rest)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc.msg}") from None
        tail = rest[end:].strip()
        if tail and not tail.startswith("#"):
            raise ConfigError(f"line {lineno}: unexpected text after value: {tail!r}")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    return from_flat(flat)


def load_config(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(config))


def config_hash(config: ExperimentConfig) -> str:
    """Digest of everything that affects results (the output location does not)."""
    flat = to_flat(config)
    del flat["output.dir"]
    canonical = json.dumps(flat, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def reference_config(master_seed: int = 0, regime_kind: str = "DEInit", data_seed: int = 0,
                     output_dir: str = "runs/reference") -> ExperimentConfig:
    """Desk-scale reference task: 3 Gaussian blobs in 2-D, MLP 2-16-3, 40 train / 100 test, T = 10 x 5."""
    return ExperimentConfig(
        dataset="Blobs",
        blobs=BlobsConfig(classes=3, dim=2, separation=4.0, sigma=1.0, data_seed=data_seed,
                          train_size=40, test_size=100),
        model_kind="MLP",
        hidden_dim=16,
        training=TrainConfig(optimizer="Adam", learning_rate=0.01, weight_decay=0.005,
                             batch_size=32, epochs=15, swa_window=5),
        regime=RandomnessRegime(regime_kind, t_de=10, t_swa=5, master_seed=master_seed),
        # the MLP Hessians here have eigenvalues down to about -0.6, so 0.005 is not enough
        if_damping=1.0,
        output_dir=output_dir,
    )
