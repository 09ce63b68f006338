"""Ensemble/SWA posterior sampling with matched seeds for counterfactual runs.

Member ``m`` always trains with the same ``(init_seed, batch_seed)``, whether
or not a sample has been removed, so the t-th original and t-th counterfactual
samples are paired by construction.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DivergedTraining, MismatchedSampleSets
from .model import ModelSpec, WeightedDataset
from .numeric import derive_seed
from .training import TrainConfig, TrainTrajectory, read_checkpoint, train_variants, write_checkpoint


class RegimeKind(str, Enum):
    DE_INIT = "DEInit"
    DE_BATCH = "DEBatch"


@dataclass(frozen=True)
class RandomnessRegime:
    kind: RegimeKind = RegimeKind.DE_INIT
    t_de: int = 10
    t_swa: int = 5
    master_seed: int = 0
    # DE-Init only: hold the batch order fixed across members
    pin_batch_seed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", RegimeKind(self.kind))
        if self.t_de < 1 or self.t_swa < 1:
            raise ValueError("t_de and t_swa must be >= 1")

    @property
    def T(self) -> int:
        return self.t_de * self.t_swa

    def member_seeds(self, member: int) -> tuple[int, int]:
        init_index = member if self.kind is RegimeKind.DE_INIT else 0
        batch_index = 0 if (self.kind is RegimeKind.DE_INIT and self.pin_batch_seed) else member
        return (
            derive_seed(self.master_seed, "init", init_index),
            derive_seed(self.master_seed, "batch", batch_index),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "t_de": self.t_de,
            "t_swa": self.t_swa,
            "master_seed": self.master_seed,
            "pin_batch_seed": self.pin_batch_seed,
        }


@dataclass(frozen=True)
class PosteriorSample:
    member_id: int
    checkpoint_epoch: int
    params: np.ndarray

    @property
    def key(self) -> tuple[int, int]:
        return (self.member_id, self.checkpoint_epoch)


@dataclass
class PosteriorSampleSet:
    regime: RandomnessRegime
    samples: list[PosteriorSample]
    removed_index: int | None = None
    seeds: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        keys = [s.key for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (member_id, checkpoint_epoch) in sample set")

    def __len__(self) -> int:
        return len(self.samples)

    def params_matrix(self) -> np.ndarray:
        return np.stack([s.params for s in self.samples])

    def by_member(self) -> dict[int, list[PosteriorSample]]:
        groups: dict[int, list[PosteriorSample]] = {}
        for s in sorted(self.samples, key=lambda s: s.key):
            groups.setdefault(s.member_id, []).append(s)
        return groups

    def restrict_swa(self, t_swa: int) -> "PosteriorSampleSet":
        """Keep each member's last ``t_swa`` checkpoints."""
        kept = []
        for members in self.by_member().values():
            kept.extend(members[-t_swa:])
        regime = RandomnessRegime(self.regime.kind, self.regime.t_de, t_swa,
                                  self.regime.master_seed, self.regime.pin_batch_seed)
        return PosteriorSampleSet(regime, kept, self.removed_index, dict(self.seeds))


def _samples_from_trajectory(member: int, traj: TrainTrajectory, t_swa: int) -> list[PosteriorSample]:
    if len(traj.checkpoints) < t_swa:
        raise ValueError(f"trajectory holds {len(traj.checkpoints)} checkpoints, need {t_swa}")
    return [PosteriorSample(member, epoch, params) for epoch, params in traj.checkpoints[-t_swa:]]


def _train_member(args):
    spec, X, y, W, config, regime, member = args
    init_seed, batch_seed = regime.member_seeds(member)
    try:
        return member, train_variants(spec, X, y, W, config, init_seed, batch_seed)
    except DivergedTraining as exc:
        raise DivergedTraining(str(exc), member_id=member) from None


def default_workers() -> int:
    return max(1, int(os.environ.get("BTDA_WORKERS", "1")))


def run_members(tasks: Sequence[tuple], workers: int | None = None) -> Iterable[tuple[int, list[TrainTrajectory]]]:
    """Train member tasks serially or on a process pool; yields ``(member, trajectories)`` in task order."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            yield _train_member(task)
        return
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        yield from pool.map(_train_member, tasks)


def _variant_weights(data: WeightedDataset, removed: Sequence[int | None]) -> np.ndarray:
    W = np.repeat(data.loss_weights[None, :], len(removed), axis=0)
    for row, j in enumerate(removed):
        if j is not None:
            W[row, j] = 0.0
    return W


def _check_window(config: TrainConfig, regime: RandomnessRegime):
    if regime.t_swa > config.swa_window:
        raise ValueError(f"t_swa={regime.t_swa} exceeds the training swa_window={config.swa_window}")


def sample_posterior(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    regime: RandomnessRegime,
    removed_index: int | None = None,
    workers: int | None = None,
) -> PosteriorSampleSet:
    """Train ``t_de`` members and keep the last ``t_swa`` checkpoints of each."""
    _check_window(config, regime)
    W = _variant_weights(data, [removed_index])
    tasks = [(spec, data.features, data.labels, W, config, regime, m) for m in range(regime.t_de)]
    samples, seeds = [], {}
    for member, (traj,) in run_members(tasks, workers):
        samples.extend(_samples_from_trajectory(member, traj, regime.t_swa))
        seeds[member] = (traj.init_seed, traj.batch_seed)
    return PosteriorSampleSet(regime, samples, removed_index, seeds)


def sample_loo_posteriors(
    spec: ModelSpec,
    data: WeightedDataset,
    config: TrainConfig,
    regime: RandomnessRegime,
    indices: Sequence[int] | None = None,
    workers: int | None = None,
    members: Sequence[int] | None = None,
    on_member=None,
) -> tuple[PosteriorSampleSet, dict[int, PosteriorSampleSet]]:
    """Original posterior plus one counterfactual posterior per removed index.

    Each member trains the original and all its weight-zeroed variants in one
    lockstep call. ``members`` restricts which members are trained (for
    resuming); ``on_member(member, trajectories)`` is invoked as each finishes.
    """
    _check_window(config, regime)
    indices = list(range(len(data))) if indices is None else list(indices)
    removed = [None] + indices
    W = _variant_weights(data, removed)
    members = list(range(regime.t_de)) if members is None else list(members)
    tasks = [(spec, data.features, data.labels, W, config, regime, m) for m in members]
    per_variant: list[list[PosteriorSample]] = [[] for _ in removed]
    seeds = {}
    for member, trajs in run_members(tasks, workers):
        if on_member is not None:
            on_member(member, trajs)
        seeds[member] = (trajs[0].init_seed, trajs[0].batch_seed)
        for row, traj in enumerate(trajs):
            per_variant[row].extend(_samples_from_trajectory(member, traj, regime.t_swa))
    original = PosteriorSampleSet(regime, per_variant[0], None, dict(seeds))
    counterfactuals = {
        j: PosteriorSampleSet(regime, per_variant[row + 1], j, dict(seeds))
        for row, j in enumerate(indices)
    }
    return original, counterfactuals


def matched_pairs(original: PosteriorSampleSet, counterfactual: PosteriorSampleSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair samples by ``(member_id, checkpoint_epoch)``, in sorted key order."""
    if counterfactual.removed_index is None:
        raise MismatchedSampleSets("counterfactual set has no removed_index")
    if original.regime != counterfactual.regime:
        raise MismatchedSampleSets("sample sets come from different regimes")
    orig = {s.key: s.params for s in original.samples}
    cf = {s.key: s.params for s in counterfactual.samples}
    if orig.keys() != cf.keys():
        raise MismatchedSampleSets("sample sets have different (member, epoch) keys")
    return [(orig[k], cf[k]) for k in sorted(orig)]


def checkpoint_name(member_id: int, epoch: int) -> str:
    return f"m{member_id:03d}_e{epoch:03d}.btda"


def write_manifest(sample_set: PosteriorSampleSet, directory: str | Path) -> Path:
    """Write ``manifest.json`` describing a sample set whose checkpoints already sit in ``directory``."""
    directory = Path(directory)
    entries = [
        {"member_id": s.member_id, "checkpoint_epoch": s.checkpoint_epoch,
         "path": checkpoint_name(s.member_id, s.checkpoint_epoch)}
        for s in sorted(sample_set.samples, key=lambda s: s.key)
    ]
    manifest = {
        "regime": sample_set.regime.to_dict(),
        "removed_index": sample_set.removed_index,
        "seeds": {str(m): {"init_seed": i, "batch_seed": b} for m, (i, b) in sorted(sample_set.seeds.items())},
        "checkpoints": entries,
    }
    path = directory / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path)
    return path


def write_sample_set(sample_set: PosteriorSampleSet, directory: str | Path) -> Path:
    """Write one checkpoint file per sample plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in sample_set.samples:
        write_checkpoint(directory / checkpoint_name(s.member_id, s.checkpoint_epoch), s.params)
    return write_manifest(sample_set, directory)


def read_sample_set(manifest_path: str | Path) -> PosteriorSampleSet:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    regime = RandomnessRegime(**manifest["regime"])
    samples = [
        PosteriorSample(e["member_id"], e["checkpoint_epoch"], read_checkpoint(manifest_path.parent / e["path"]))
        for e in manifest["checkpoints"]
    ]
    seeds = {int(m): (v["init_seed"], v["batch_seed"]) for m, v in manifest["seeds"].items()}
    return PosteriorSampleSet(regime, samples, manifest["removed_index"], seeds)
