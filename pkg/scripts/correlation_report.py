"""Run the reference experiment with every method and print the correlation matrices."""
import argparse

import numpy as np

from bayes_tda.harness.config import reference_config
from bayes_tda.harness.experiment import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--regime", choices=["DEInit", "DEBatch"], default="DEInit")
    ap.add_argument("--out", default="runs/reference")
    args = ap.parse_args()
    rep = run_experiment(reference_config(args.seed, args.regime, output_dir=args.out))
    for stat, corr in rep.correlations.items():
        print(f"\nPearson of per-pair {stat.value}")
        print("       " + "".join(f"{m:>8s}" for m in corr.methods))
        for m, row in zip(corr.methods, np.asarray(corr.pearson)):
            print(f"{m:>7s}" + "".join(f"{v:8.3f}" for v in row))
    print(f"\nreport in {args.out}")


if __name__ == "__main__":
    main()
