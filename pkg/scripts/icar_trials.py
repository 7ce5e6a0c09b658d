"""ICA-R recovery over seeded random mixtures of 2 super- and 2 sub-Gaussian sources."""

import argparse

import numpy as np

from dnt.selftest import icar_recovery


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    corrs, secs = icar_recovery(args.trials, args.seed)
    print(f"trials {len(corrs)}  |corr| > 0.95: {(corrs > 0.95).sum()}  "
          f"min {corrs.min():.4f}  median {np.median(corrs):.4f}  {secs:.2f}s")


if __name__ == "__main__":
    main()
