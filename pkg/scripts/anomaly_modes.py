"""Compare the three drift/occlusion tests on the generated occlusion sequence."""

import argparse

from dnt.config import load_config
from dnt.selftest import synthetic_tracking


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for mode in ("literal", "deviation", "relative"):
        cfg = load_config(**{"train.learning_rate": "1e-2", "tracker.anomaly_mode": mode})
        run = synthetic_tracking(cfg, args.seed)
        print(f"{mode:9s} anomalies {int(run.anomalies.sum()):2d} (in occlusion {run.anomalies_in_window})  "
              f"mean visible IoU {run.mean_visible_iou:.3f}  {run.seconds:.0f}s")


if __name__ == "__main__":
    main()
