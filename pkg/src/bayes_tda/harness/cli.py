"""Command line: ``btda run | plot | sweep-size | validate-config``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..errors import BayesTDAError, ConfigError
from . import config as cfgmod

CONFIRM_ABOVE = 5000


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _apply_overrides(cfg, args):
    regime = cfg.regime
    changes = {}
    if args.regime:
        changes["kind"] = args.regime
    if args.t_de is not None:
        changes["t_de"] = args.t_de
    if args.t_swa is not None:
        changes["t_swa"] = args.t_swa
    if args.master_seed is not None:
        changes["master_seed"] = args.master_seed
    top = {}
    if changes:
        top["regime"] = replace(regime, **changes)
    if args.methods:
        top["methods"] = tuple(_csv_list(args.methods))
    if args.output_dir:
        top["output_dir"] = args.output_dir
    try:
        return replace(cfg, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _confirm(runs: int, assume_yes: bool) -> bool:
    print(f"this experiment implies {runs} training runs")
    if runs <= CONFIRM_ABOVE or assume_yes:
        return True
    if not sys.stdin.isatty():
        print(f"more than {CONFIRM_ABOVE} runs; pass --yes to proceed", file=sys.stderr)
        return False
    return input("proceed? [y/N] ").strip().lower() in ("y", "yes")


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    if not _confirm(cfg.training_runs(), args.yes):
        return 1
    report = run_experiment(cfg, resume=args.resume, workers=args.workers)
    for method, row in report.summary.items():
        print(f"{method:7s} mean p = {row['mean_p_value']:.4f}  p<0.05 fraction = {row['low_noise_fraction']:.4f}")
    print(f"report written to {cfg.output_dir}")
    return 0


def cmd_plot(args) -> int:
    from .experiment import load_report
    from .plots import emit_plots

    paths = emit_plots(load_report(args.report_dir), args.report_dir)
    for p in paths:
        print(p)
    return 0


def cmd_sweep_size(args) -> int:
    from .experiment import size_sweep

    cfg = _apply_overrides(cfgmod.load_config(args.config), args)
    sizes = [int(s) for s in _csv_list(args.sizes)]
    seeds = [int(s) for s in _csv_list(args.data_seeds)]
    runs = sum(replace(cfg, blobs=replace(cfg.blobs, train_size=n)).training_runs() for n in sizes) * len(seeds)
    if not _confirm(runs, args.yes):
        return 1
    results = size_sweep(cfg, sizes, seeds, workers=args.workers)
    for method, by_seed in results["mean_p"].items():
        for seed, ps in by_seed.items():
            print(f"{method} seed {seed}: " + "  ".join(f"N={n}: {p:.4f}" for n, p in zip(sizes, ps)))
    return 0


def cmd_validate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    again = cfgmod.loads(cfgmod.dumps(cfg))
    if again != cfg:
        print("config does not round-trip", file=sys.stderr)
        return 1
    print(f"ok: hash {cfgmod.config_hash(cfg)}, {cfg.training_runs()} training runs")
    return 0


def _add_overrides(p):
    p.add_argument("--methods", help="comma list, e.g. LOO,IF,GD")
    p.add_argument("--regime", choices=["DEInit", "DEBatch"])
    p.add_argument("--t-de", type=int)
    p.add_argument("--t-swa", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int, help="process count (default: BTDA_WORKERS or 1)")
    p.add_argument("--yes", action="store_true", help=f"skip confirmation above {CONFIRM_ABOVE} training runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btda", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write its report")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="reuse completed members from the checkpoint directory")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot", help="(re)draw SVG plots for a report directory")
    p.add_argument("report_dir")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep-size", help="mean p-value against training-set size")
    p.add_argument("config")
    p.add_argument("--sizes", default="15,30,60")
    p.add_argument("--data-seeds", default="0,1,2")
    _add_overrides(p)
    p.set_defaults(func=cmd_sweep_size)

    p = sub.add_parser("validate-config", help="parse a config and check it round-trips")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BayesTDAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
