"""End-to-end experiment: posterior sampling, attribution, statistics, report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..attribution import Method, estimator_tables, loo_tables, write_scores_csv
from ..errors import BayesTDAError
from ..posterior import (
    PosteriorSample,
    PosteriorSampleSet,
    checkpoint_name,
    sample_loo_posteriors,
    write_manifest,
)
from ..stats import (
    CorrelationReport,
    PairStatistics,
    Statistic,
    build_correlation_report,
    estimator_statistics_table,
    loo_statistics_table,
    p_value_histogram,
)
from ..training import read_checkpoint, write_checkpoint
from . import config as cfgmod
from .config import ExperimentConfig
from .data import TestSet, generate_blobs, load_idx

log = logging.getLogger(__name__)

HIST_BINS = 20
STAT_FILE_TAGS = {Statistic.MEAN: "mean", Statistic.STD: "std", Statistic.PVALUE: "p"}
PAIR_STATS_COLUMNS = ["method", "train_index", "test_index", "mean", "variance", "sample_variance",
                      "t_stat", "p_value", "n_samples", "degenerate"]


class ExperimentAborted(BayesTDAError, RuntimeError):
    pass


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    pair_stats: dict[str, list[PairStatistics]]
    histograms: dict[str, tuple[list[int], float]]
    correlations: dict[Statistic, CorrelationReport]
    summary: dict[str, dict]
    provenance: dict
    swa_ablation: list[float] | None = None
    extras: dict = field(default_factory=dict)

    def mean_p(self, method: str | Method) -> float:
        return self.summary[Method(method).value]["mean_p_value"]

    def low_noise_fraction(self, method: str | Method) -> float:
        return self.summary[Method(method).value]["low_noise_fraction"]

    def statistic_vector(self, method: str | Method, statistic: Statistic | str) -> np.ndarray:
        return np.array([s.value(Statistic(statistic)) for s in self.pair_stats[Method(method).value]])


def load_datasets(config: ExperimentConfig):
    if config.dataset == "Blobs":
        return generate_blobs(config.blobs)
    c = config.idx
    return load_idx(c.image_path, c.label_path, c.per_class, c.downscale, c.seed,
                    classes=list(c.classes), test_per_class=c.test_per_class)


# --------------------------------------------------------------------------
# Posterior sampling with resumable checkpoints
# --------------------------------------------------------------------------

def _variant_dirs(n_train: int, loo: bool) -> list[tuple[int | None, str]]:
    out = [(None, "original")]
    if loo:
        out += [(j, f"loo_{j:04d}") for j in range(n_train)]
    return out


def _atomic_write(path: Path, data: str | bytes):
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def sample_experiment_posteriors(config: ExperimentConfig, spec, train, checkpoint_dir: Path | None = None,
                                 resume: bool = False, workers: int | None = None):
    """Original posterior and (when LOO is requested) every counterfactual posterior.

    With ``checkpoint_dir`` each member's checkpoints are written as soon as it
    finishes and recorded in ``progress.json``; ``resume`` reloads recorded
    members instead of retraining them.
    """
    regime, tc = config.regime, config.training
    variants = _variant_dirs(len(train), config.loo_sweep)
    epochs = list(range(tc.epochs - regime.t_swa + 1, tc.epochs + 1))
    chash = cfgmod.config_hash(config)
    done: list[int] = []
    progress_path = None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        progress_path = checkpoint_dir / "progress.json"
        if resume and progress_path.exists():
            progress = json.loads(progress_path.read_text())
            if progress.get("config_hash") != chash:
                raise ExperimentAborted("checkpoint directory belongs to a different config; refusing to resume")
            done = sorted(progress["completed_members"])
        for _, name in variants:
            (checkpoint_dir / name).mkdir(exist_ok=True)

    per_variant: list[list[PosteriorSample]] = [[] for _ in variants]
    for m in done:
        for row, (_, name) in enumerate(variants):
            for e in epochs:
                params = read_checkpoint(checkpoint_dir / name / checkpoint_name(m, e))
                per_variant[row].append(PosteriorSample(m, e, params))

    def on_member(member, trajs):
        if checkpoint_dir is None:
            return
        for (_, name), traj in zip(variants, trajs):
            for epoch, params in traj.checkpoints[-regime.t_swa:]:
                write_checkpoint(checkpoint_dir / name / checkpoint_name(member, epoch), params)
        done.append(member)
        _atomic_write(progress_path, json.dumps({"config_hash": chash, "completed_members": sorted(done)}))

    todo = [m for m in range(regime.t_de) if m not in set(done)]
    indices = [j for j, _ in variants[1:]]
    if todo:
        try:
            orig, cfs = sample_loo_posteriors(spec, train, tc, regime, indices=indices, workers=workers,
                                              members=todo, on_member=on_member)
        except BayesTDAError as exc:
            hint = " (rerun with --resume to keep completed members)" if checkpoint_dir else ""
            raise ExperimentAborted(f"training failed: {exc}{hint}") from exc
        per_variant[0].extend(orig.samples)
        for row, j in enumerate(indices, start=1):
            per_variant[row].extend(cfs[j].samples)

    seeds = {m: regime.member_seeds(m) for m in range(regime.t_de)}
    sets = [PosteriorSampleSet(regime, samples, j, dict(seeds)) for (j, _), samples in zip(variants, per_variant)]
    if checkpoint_dir is not None:
        for s, (_, name) in zip(sets, variants):
            write_manifest(s, checkpoint_dir / name)
    original = sets[0]
    counterfactuals = {j: s for (j, _), s in zip(variants[1:], sets[1:])}
    return original, counterfactuals


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------

def _nanmean(values) -> float:
    arr = np.array([v for v in values if not math.isnan(v)])
    return float(arr.mean()) if arr.size else float("nan")


def _summarize(pair_stats):
    summary, histograms = {}, {}
    for method, rows in pair_stats.items():
        p = np.array([s.p_value for s in rows if not s.degenerate])
        if p.size:
            counts, frac = p_value_histogram(p, HIST_BINS)
            histograms[method] = ([int(c) for c in counts], frac)
        summary[method] = {
            "mean_p_value": float(p.mean()) if p.size else float("nan"),
            "low_noise_fraction": histograms[method][1] if p.size else float("nan"),
            "n_pairs": len(rows),
            "n_degenerate": sum(s.degenerate for s in rows),
        }
    return summary, histograms


def loo_mean_p(spec, original, counterfactuals, test: TestSet) -> float:
    orig, cf = loo_tables(spec, original, counterfactuals, test.features, test.labels)
    return _nanmean([s.p_value for s in loo_statistics_table(orig, cf)])


def compute_report(config: ExperimentConfig, checkpoint_dir: Path | None = None, resume: bool = False,
                   workers: int | None = None, swa_ablation: bool = True) -> ExperimentReport:
    """Run every stage in memory and return the report (nothing is written except checkpoints)."""
    train, test = load_datasets(config)
    spec = config.model_spec(train.features.shape[1], train.num_classes)
    original, counterfactuals = sample_experiment_posteriors(config, spec, train, checkpoint_dir, resume, workers)

    pair_stats: dict[str, list[PairStatistics]] = {}
    extras = {}
    if config.loo_sweep:
        orig, cf = loo_tables(spec, original, counterfactuals, test.features, test.labels)
        pair_stats[Method.LOO.value] = loo_statistics_table(orig, cf)
    others = [Method(m) for m in config.methods if m != Method.LOO.value]
    if others:
        tables = estimator_tables(spec, original, train, test.features, test.labels, config.training,
                                  methods=others, damping=config.if_damping, solver=config.if_solver,
                                  include_l2=config.hessian_includes_l2)
        extras["score_tables"] = tables
        for m in others:
            pair_stats[m.value] = estimator_statistics_table(tables[m], m.value)
    # keep the configured method order
    pair_stats = {m: pair_stats[m] for m in config.methods}

    summary, histograms = _summarize(pair_stats)
    correlations = {s: build_correlation_report(pair_stats, s) for s in Statistic} if pair_stats else {}

    ablation = None
    if swa_ablation and config.loo_sweep and config.regime.T > 1:
        ablation = []
        for k in range(1, config.regime.t_swa + 1):
            if config.regime.t_de * k < 2:
                ablation.append(float("nan"))
                continue
            ablation.append(loo_mean_p(spec, original.restrict_swa(k),
                                       {j: c.restrict_swa(k) for j, c in counterfactuals.items()}, test))

    provenance = {
        "config_hash": cfgmod.config_hash(config),
        "code_version": __version__,
        "member_seeds": {str(m): {"init_seed": i, "batch_seed": b} for m, (i, b) in sorted(original.seeds.items())},
        "train_size": len(train),
        "test_size": len(test),
        "param_count": spec.param_count,
        "training_runs": config.training_runs(),
    }
    return ExperimentReport(config, pair_stats, histograms, correlations, summary, provenance, ablation, extras)


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def pair_stats_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PAIR_STATS_COLUMNS)
    for method, rows in report.pair_stats.items():
        for s in rows:
            w.writerow([method, s.pair[0], s.pair[1], _fmt(s.mean), _fmt(s.variance), _fmt(s.sample_variance),
                        _fmt(s.t_stat), _fmt(s.p_value), _fmt(s.n_samples), _fmt(s.degenerate)])
    return buf.getvalue()


def read_pair_stats_csv(path: str | Path) -> dict[str, list[PairStatistics]]:
    out: dict[str, list[PairStatistics]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["method"], []).append(PairStatistics(
                pair=(int(row["train_index"]), int(row["test_index"])),
                method=row["method"],
                mean=float(row["mean"]),
                variance=float(row["variance"]),
                sample_variance=float(row["sample_variance"]),
                t_stat=float(row["t_stat"]),
                p_value=float(row["p_value"]),
                n_samples=int(row["n_samples"]),
                degenerate=row["degenerate"] == "1",
            ))
    return out


def correlation_csv(report: CorrelationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["coefficient", "method"] + report.methods)
    for name, mat in (("pearson", report.pearson), ("spearman", report.spearman)):
        for m, row in zip(report.methods, mat):
            w.writerow([name, m] + ["" if not np.isfinite(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def _json(obj) -> str:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o
    return json.dumps(clean(obj), indent=2, default=default) + "\n"


def write_report(report: ExperimentReport, out_dir: str | Path, timestamp: str | None = None) -> list[Path]:
    """Write all report files; each file is replaced atomically."""
    from .plots import emit_plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timestamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    written = []

    def put(name, data):
        path = out / name
        _atomic_write(path, data)
        written.append(path)

    put("config.cfg", cfgmod.dumps(report.config))
    put("pair_stats.csv", pair_stats_csv(report))
    for stat, corr in report.correlations.items():
        tag = STAT_FILE_TAGS[stat]
        put(f"corr_{tag}.json", _json(corr.to_dict()))
        put(f"corr_{tag}.csv", correlation_csv(corr))
    if report.config.dump_scores:
        for method, table in report.extras.get("score_tables", {}).items():
            path = out / f"scores_{method.value}.csv"
            write_scores_csv(path.with_name(path.name + ".tmp"), table)
            os.replace(path.with_name(path.name + ".tmp"), path)
            written.append(path)
    summary = {
        "methods": report.summary,
        "histogram_bins": HIST_BINS,
        "histograms": {m: {"counts": c, "low_noise_fraction": f} for m, (c, f) in report.histograms.items()},
        "swa_ablation_mean_loo_p": report.swa_ablation,
        "provenance": report.provenance,
        "generated_at": timestamp,
    }
    put("summary.json", _json(summary))
    written.extend(emit_plots(report, out))
    manifest = {
        "config": cfgmod.to_flat(report.config),
        "config_hash": report.provenance["config_hash"],
        "code_version": report.provenance["code_version"],
        "files": sorted(p.name for p in written),
        "generated_at": timestamp,
    }
    put("manifest.json", _json(manifest))
    return written


def load_report(out_dir: str | Path) -> ExperimentReport:
    out = Path(out_dir)
    config = cfgmod.load_config(out / "config.cfg")
    pair_stats = read_pair_stats_csv(out / "pair_stats.csv")
    summary_doc = json.loads((out / "summary.json").read_text())
    correlations = {}
    for stat, tag in STAT_FILE_TAGS.items():
        path = out / f"corr_{tag}.json"
        if path.exists():
            correlations[stat] = CorrelationReport.from_dict(json.loads(path.read_text()))
    histograms = {m: (h["counts"], h["low_noise_fraction"]) for m, h in summary_doc["histograms"].items()}
    summary = {m: {k: (float("nan") if v is None else v) for k, v in d.items()}
               for m, d in summary_doc["methods"].items()}
    return ExperimentReport(config, pair_stats, histograms, correlations, summary,
                            summary_doc["provenance"], summary_doc.get("swa_ablation_mean_loo_p"))


def run_experiment(config: ExperimentConfig, resume: bool = False, workers: int | None = None,
                   output_dir: str | Path | None = None) -> ExperimentReport:
    out = Path(output_dir or config.output_dir)
    report = compute_report(config, checkpoint_dir=out / "checkpoints", resume=resume, workers=workers)
    write_report(report, out)
    return report


def size_sweep(config: ExperimentConfig, sizes: list[int], data_seeds: list[int], out_dir: str | Path | None = None,
               workers: int | None = None, write: bool = True) -> dict:
    """Mean p-value per method for each training-set size (nested subsets) and data seed."""
    out = Path(out_dir or config.output_dir)
    results: dict = {"sizes": list(sizes), "data_seeds": list(data_seeds), "mean_p": {}}
    for seed in data_seeds:
        for n in sizes:
            cfg = _sized_config(config, n, seed)
            sub = out / f"size_{n}_seed_{seed}"
            if write:
                report = run_experiment(cfg, workers=workers, output_dir=sub)
            else:
                report = compute_report(cfg, workers=workers, swa_ablation=False)
            for method in cfg.methods:
                results["mean_p"].setdefault(method, {}).setdefault(str(seed), []).append(report.mean_p(method))
    if write:
        from .plots import size_sweep_svg
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "sweep_size.json", _json(results))
        _atomic_write(out / "p_vs_size.svg", size_sweep_svg(results))
    return results


def _sized_config(config: ExperimentConfig, n: int, seed: int) -> ExperimentConfig:
    if config.dataset == "Blobs":
        return replace(config, blobs=replace(config.blobs, train_size=n, data_seed=seed))
    classes = len(config.idx.classes)
    if n % classes:
        raise ValueError(f"size {n} is not divisible by the {classes} IDX classes")
    return replace(config, idx=replace(config.idx, per_class=n // classes, seed=seed))
