"""Initial dual-network training on a generated first frame; writes the loss trace as CSV."""

import argparse

from dnt import dualnet
from dnt.config import load_config
from dnt.selftest import init_adaptation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lr", default="1e-2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="init_trace.csv")
    args = ap.parse_args()
    cfg = load_config(**{"train.learning_rate": args.lr})
    for layer, trace in init_adaptation(cfg, args.seed).items():
        dualnet.append_loss_trace(args.out, trace, tag=layer.value)
        print(f"{layer.value}: {trace[0]:.4f} -> {trace[-1]:.4f}  (ratio {trace[-1] / trace[0]:.3f})")
    print(f"trace written to {args.out}")


if __name__ == "__main__":
    main()
