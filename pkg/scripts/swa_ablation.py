"""Mean LOO p-value as the number of SWA checkpoints per member grows."""
import argparse
from dataclasses import replace

from bayes_tda.harness.config import reference_config
from bayes_tda.harness.experiment import compute_report
from bayes_tda.stats import spearman


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--regime", choices=["DEInit", "DEBatch"], default="DEInit")
    args = ap.parse_args()
    for seed in args.seeds:
        cfg = replace(reference_config(master_seed=seed, regime_kind=args.regime), methods=("LOO",))
        curve = compute_report(cfg).swa_ablation
        t = list(range(1, len(curve) + 1))
        print(f"seed {seed}: " + " ".join(f"{p:.3f}" for p in curve) + f"  Spearman {spearman(t, curve):+.2f}")


if __name__ == "__main__":
    main()
