"""Command-line entry point: ``dnt track | eval | bench | selftest``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from dnt import bench
from dnt.config import ConfigError, DNTConfig, dump_config, load_config
from dnt.features import ModelUnavailableError, load_frame, make_backbone
from dnt.tracking import track_sequence

log = logging.getLogger("dnt")


def _config(args) -> DNTConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if getattr(args, "backbone", None):
        overrides["features.backbone"] = args.backbone
    if getattr(args, "seed", None) is not None:
        overrides["tracker.rng_seed"] = str(args.seed)
        overrides["train.rng_seed"] = str(args.seed)
    return load_config(args.config, **overrides)


def _tracker_fn(cfg: DNTConfig):
    backbone = make_backbone(cfg.features)

    def run(frames, init_rect):
        return np.array([r.rect for r in track_sequence(frames, init_rect, cfg, backbone)])

    return run


def cmd_track(args) -> int:
    cfg = _config(args)
    seq = bench.load_sequence(args.sequence)
    backbone = make_backbone(cfg.features)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar = out.with_suffix(".jsonl")

    def frames():
        for i, path in enumerate(seq.frame_paths, 1):
            try:
                yield load_frame(path)
            except Exception as exc:
                raise SystemExit(f"{seq.name}: cannot decode frame {i} ({path}): {exc}")

    n = 0
    for rep in track_sequence(frames(), seq.rects[0], cfg, backbone, out, sidecar, args.debug_maps):
        n += 1
        if rep.anomaly:
            log.info("frame %d: anomaly, updates %s", rep.frame_index, rep.updates)
    log.info("%s: %d frames -> %s", seq.name, n, out)
    return 0


def cmd_eval(args) -> int:
    data = args.data or os.environ.get("DNT_DATA")
    if not data:
        raise SystemExit("no dataset root: pass --data or set DNT_DATA")
    seqs = bench.load_dataset(data)
    report = bench.evaluate_results(seqs, args.results, args.protocol)
    bench.emit_report(report, args.out)
    agg = report.aggregate()
    print(f"{args.protocol.upper()} over {len(seqs)} sequences: "
          f"precision@20 {agg.prec_at_20:.3f}  success AUC {agg.auc:.3f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    data = args.data or cfg.data_root
    if not data:
        raise SystemExit("no dataset root: pass --data or set DNT_DATA")
    seqs = bench.load_dataset(data)
    results = Path(args.out) / "results"
    results.mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.cfg").write_text(dump_config(cfg))
    report, _ = bench.run_protocol(seqs, _tracker_fn(cfg), args.protocol, results)
    bench.emit_report(report, args.out)
    agg = report.aggregate()
    print(f"{args.protocol.upper()} over {len(seqs)} sequences: "
          f"precision@20 {agg.prec_at_20:.3f}  success AUC {agg.auc:.3f}")
    return 0


def cmd_selftest(args) -> int:
    from dnt.selftest import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dnt", description="dual-network tracker with ICA-R heat maps")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="config overrides")
        p.add_argument("--backbone", choices=("pretrained", "test"))
        p.add_argument("--seed", type=int)

    p = sub.add_parser("track", help="track one OTB-format sequence")
    p.add_argument("--sequence", required=True, help="directory with img/ and groundtruth_rect.txt")
    p.add_argument("--out", required=True, help="result log, one x,y,w,h line per frame")
    p.add_argument("--debug-maps", help="directory for per-frame ICA-R and prior maps")
    config_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score stored result logs")
    p.add_argument("--results", required=True)
    p.add_argument("--data", help="dataset root (default: $DNT_DATA)")
    p.add_argument("--protocol", choices=("ope", "sre", "tre"), default="ope")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a protocol over a dataset and score it")
    p.add_argument("--data", help="dataset root (default: data_root / $DNT_DATA)")
    p.add_argument("--protocol", choices=("ope", "sre", "tre"), default="ope")
    p.add_argument("--out", required=True)
    config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="ICA-R recovery, gradient check and synthetic tracking")
    p.add_argument("--quick", action="store_true", help="fewer ICA-R trials and gradient draws")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, bench.SequenceError, ModelUnavailableError) as exc:
        print(f"dnt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
