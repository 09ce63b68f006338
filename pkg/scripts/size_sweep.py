"""Mean LOO p-value against training-set size on the reference blobs."""
import argparse
from dataclasses import replace

from bayes_tda.harness.config import reference_config
from bayes_tda.harness.experiment import size_sweep
from bayes_tda.stats import spearman


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[15, 30, 60])
    ap.add_argument("--data-seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/size_sweep", help="writes sweep_size.json and p_vs_size.svg here")
    args = ap.parse_args()
    cfg = replace(reference_config(output_dir=args.out), methods=("LOO",))
    res = size_sweep(cfg, args.sizes, args.data_seeds)
    for seed, ps in res["mean_p"]["LOO"].items():
        cells = "  ".join(f"N={n}: {p:.4f}" for n, p in zip(args.sizes, ps))
        print(f"seed {seed}: {cells}  Spearman {spearman(args.sizes, ps):+.2f}")


if __name__ == "__main__":
    main()
