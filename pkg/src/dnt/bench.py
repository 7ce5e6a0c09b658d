"""OTB-style evaluation: sequence loading, OPE/SRE/TRE runs, precision/success curves, reports."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from dnt.features import load_frame

log = logging.getLogger(__name__)

OTB_ATTRIBUTES = ("IV", "SV", "OCC", "DEF", "MB", "FM", "IPR", "OPR", "OV", "BC", "LR")
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
SRE_SHIFTS = ((-0.1, 0), (0.1, 0), (0, -0.1), (0, 0.1), (-0.1, -0.1), (-0.1, 0.1), (0.1, -0.1), (0.1, 0.1))
SRE_SCALES = (0.8, 0.9, 1.1, 1.2)
TRE_SEGMENTS = 20
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}

# (frames, init_rect) -> one rect per frame, the first being init_rect
TrackerFn = Callable[[Sequence[np.ndarray], np.ndarray], np.ndarray]


class SequenceError(ValueError):
    pass


@dataclass
class SequenceSpec:
    name: str
    frame_paths: list[Path]
    rects: np.ndarray
    attributes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rects = np.asarray(self.rects, dtype=np.float64).reshape(-1, 4)
        if len(self.frame_paths) != len(self.rects):
            raise SequenceError(
                f"{self.name}: {len(self.frame_paths)} frames but {len(self.rects)} ground-truth rects")
        if len(self.rects) < 2:
            raise SequenceError(f"{self.name}: need at least 2 frames")
        if np.any(self.rects[:, 2:] <= 0):
            bad = int(np.flatnonzero(np.any(self.rects[:, 2:] <= 0, axis=1))[0]) + 1
            raise SequenceError(f"{self.name}: non-positive rect at line {bad}")

    def __len__(self) -> int:
        return len(self.rects)

    def frames(self, start: int = 0) -> Iterable[np.ndarray]:
        for p in self.frame_paths[start:]:
            yield load_frame(p)


@dataclass
class ResultLog:
    sequence: str
    rects: np.ndarray
    protocol: str = "ope"
    variant: int = 0
    seed: int = 0
    start: int = 0  # first ground-truth frame the log covers


@dataclass
class MetricCurves:
    precision: np.ndarray
    success: np.ndarray

    @property
    def prec_at_20(self) -> float:
        return float(self.precision[20])

    @property
    def auc(self) -> float:
        return float(self.success.mean())

    def check(self) -> None:
        for name, arr in (("precision", self.precision), ("success", self.success)):
            if arr.min() < 0 or arr.max() > 1:
                raise AssertionError(f"{name} curve leaves [0, 1]")
        if np.any(np.diff(self.precision) < 0):
            raise AssertionError("precision curve decreases")
        if np.any(np.diff(self.success) > 0):
            raise AssertionError("success curve increases")


@dataclass
class Report:
    protocol: str
    sequences: dict[str, MetricCurves]
    attributes: dict[str, list[str]]

    def by_attribute(self) -> dict[str, MetricCurves]:
        out = {}
        for tag in sorted({t for tags in self.attributes.values() for t in tags}):
            names = [n for n in self.sequences if tag in self.attributes.get(n, ())]
            out[tag] = average_curves([self.sequences[n] for n in names])
        return out

    def aggregate(self) -> MetricCurves:
        return average_curves(list(self.sequences.values()))


# ---------------------------------------------------------------- ingestion


def _parse_rects(text: str, source: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = [p for p in re.split(r"[,\s]+", line.strip()) if p]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SequenceError(f"{source}:{lineno}: unreadable rect {line!r}") from None
        if len(vals) != 4:
            raise SequenceError(f"{source}:{lineno}: expected 4 values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise SequenceError(f"{source}: no rects")
    return np.array(rows)


def load_sequence(root: str | Path) -> SequenceSpec:
    root = Path(root)
    img = root / "img"
    if not img.is_dir():
        raise SequenceError(f"{root}: missing img/ directory")
    frames = sorted(p for p in img.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    gt = root / "groundtruth_rect.txt"
    if not gt.is_file():
        raise SequenceError(f"{root}: missing groundtruth_rect.txt")
    rects = _parse_rects(gt.read_text(), str(gt))
    attrs_file = root / "attrs.txt"
    attrs = [a for a in re.split(r"[,\s]+", attrs_file.read_text().strip()) if a] if attrs_file.is_file() else []
    unknown = sorted(set(attrs) - set(OTB_ATTRIBUTES))
    if unknown:
        log.warning("%s: attribute tags outside the OTB set: %s", root.name, ", ".join(unknown))
    return SequenceSpec(root.name, frames, rects, attrs)


def load_dataset(root: str | Path) -> list[SequenceSpec]:
    """Every sub-directory of ``root`` holding a ground-truth file, in name order."""
    root = Path(root)
    if (root / "groundtruth_rect.txt").is_file():
        return [load_sequence(root)]
    return [load_sequence(d) for d in sorted(root.iterdir()) if (d / "groundtruth_rect.txt").is_file()]


def read_result(path: str | Path) -> np.ndarray:
    return _parse_rects(Path(path).read_text(), str(path))


def write_result(path: str | Path, rects: np.ndarray) -> None:
    lines = [",".join(f"{v:.2f}" for v in r) for r in np.asarray(rects).reshape(-1, 4)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- metrics


def center_error(a, b) -> np.ndarray | float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ca = a[..., :2] + a[..., 2:] / 2
    cb = b[..., :2] + b[..., 2:] / 2
    d = np.sqrt(((ca - cb) ** 2).sum(axis=-1))
    return float(d) if d.ndim == 0 else d


def overlap(a, b) -> np.ndarray | float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a_lo, a_hi = a[..., :2], a[..., :2] + a[..., 2:]
    b_lo, b_hi = b[..., :2], b[..., :2] + b[..., 2:]
    inter = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0, None).prod(axis=-1)
    # areas from the same corner differences, so identical boxes give exactly 1
    union = (a_hi - a_lo).prod(axis=-1) + (b_hi - b_lo).prod(axis=-1) - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def curves(results: np.ndarray, gt: np.ndarray) -> MetricCurves:
    results, gt = np.asarray(results).reshape(-1, 4), np.asarray(gt).reshape(-1, 4)
    if len(results) != len(gt):
        raise SequenceError(f"{len(results)} result rects for {len(gt)} ground-truth frames")
    err = center_error(results, gt)
    ov = overlap(results, gt)
    precision = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (ov[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return MetricCurves(precision, success)


def average_curves(items: list[MetricCurves]) -> MetricCurves:
    if not items:
        raise ValueError("nothing to average")
    return MetricCurves(np.mean([c.precision for c in items], axis=0),
                        np.mean([c.success for c in items], axis=0))


# ---------------------------------------------------------------- protocols


def sre_init(rect, variant: int) -> np.ndarray:
    """Perturbed initial rect for SRE variant 0..11 (8 shifts, then 4 scales)."""
    x, y, w, h = np.asarray(rect, dtype=np.float64)
    if variant < len(SRE_SHIFTS):
        dx, dy = SRE_SHIFTS[variant]
        return np.array([x + dx * w, y + dy * h, w, h])
    s = SRE_SCALES[variant - len(SRE_SHIFTS)]
    cx, cy = x + w / 2, y + h / 2
    return np.array([cx - s * w / 2, cy - s * h / 2, s * w, s * h])


def tre_starts(n_frames: int, segments: int = TRE_SEGMENTS) -> list[int]:
    """Evenly spaced 0-based start frames; each segment keeps at least 2 frames."""
    return sorted({int(v) for v in np.floor(np.linspace(0, n_frames - 2, segments))})


def _variants(seq: SequenceSpec, protocol: str) -> list[tuple[int, int, np.ndarray]]:
    """(variant id, start frame, init rect) for each run of ``protocol``."""
    if protocol == "ope":
        return [(0, 0, seq.rects[0])]
    if protocol == "sre":
        return [(k, 0, sre_init(seq.rects[0], k)) for k in range(len(SRE_SHIFTS) + len(SRE_SCALES))]
    if protocol == "tre":
        return [(k, s, seq.rects[s]) for k, s in enumerate(tre_starts(len(seq)))]
    raise ValueError(f"unknown protocol {protocol!r}")


def result_name(seq_name: str, protocol: str, variant: int) -> str:
    return f"{seq_name}.txt" if protocol == "ope" else f"{seq_name}.{protocol}{variant}.txt"


def run_protocol(sequences: list[SequenceSpec], tracker: TrackerFn, protocol: str,
                 results_dir: str | Path | None = None) -> tuple[Report, list[ResultLog]]:
    logs = []
    per_seq = {}
    for seq in sequences:
        frames = list(seq.frames())
        seq_curves = []
        for variant, start, init in _variants(seq, protocol):
            rects = np.asarray(tracker(frames[start:], init)).reshape(-1, 4)
            logs.append(ResultLog(seq.name, rects, protocol, variant, start=start))
            if results_dir is not None:
                write_result(Path(results_dir) / result_name(seq.name, protocol, variant), rects)
            seq_curves.append(curves(rects, seq.rects[start:]))
        per_seq[seq.name] = average_curves(seq_curves)
        log.info("%s %s: prec@20 %.3f auc %.3f", protocol, seq.name,
                 per_seq[seq.name].prec_at_20, per_seq[seq.name].auc)
    return Report(protocol, per_seq, {s.name: s.attributes for s in sequences}), logs


def run_ope(sequences, tracker: TrackerFn, results_dir=None):
    return run_protocol(sequences, tracker, "ope", results_dir)


def run_sre(sequences, tracker: TrackerFn, results_dir=None):
    return run_protocol(sequences, tracker, "sre", results_dir)


def run_tre(sequences, tracker: TrackerFn, results_dir=None):
    return run_protocol(sequences, tracker, "tre", results_dir)


def evaluate_results(sequences: list[SequenceSpec], results_dir: str | Path, protocol: str) -> Report:
    """Score stored result logs (as written by ``run_protocol`` or ``dnt track``)."""
    results_dir = Path(results_dir)
    per_seq = {}
    for seq in sequences:
        seq_curves = []
        for variant, start, _ in _variants(seq, protocol):
            path = results_dir / result_name(seq.name, protocol, variant)
            if not path.is_file():
                raise SequenceError(f"missing result log {path}")
            seq_curves.append(curves(read_result(path), seq.rects[start:]))
        per_seq[seq.name] = average_curves(seq_curves)
    return Report(protocol, per_seq, {s.name: s.attributes for s in sequences})


# ---------------------------------------------------------------- reports


def _write_table(path: Path, header: list[str], rows: list[list], fmt: str = ".3f") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, fmt) if isinstance(v, float) else v for v in row])


def _plot(path: Path, x: np.ndarray, named: dict[str, np.ndarray], xlabel: str, ylabel: str,
          legend_value: Callable[[np.ndarray], float], title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, y in named.items():
        ax.plot(x, y, label=f"{name} [{legend_value(y):.3f}]")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="best", fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(report: Report, out_dir: str | Path) -> Path:
    """CSV tables and SVG precision/success plots; asserts curve invariants first.

    Summary tables use 3 decimals; ``curves.csv`` keeps full precision so every
    aggregate can be recomputed from it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    attrs = report.by_attribute()
    agg = report.aggregate()
    for c in [*report.sequences.values(), *attrs.values(), agg]:
        c.check()

    _write_table(out / "per_sequence.csv", ["sequence", "prec_at_20", "auc", "attributes"],
                 [[n, c.prec_at_20, c.auc, " ".join(report.attributes.get(n, []))]
                  for n, c in report.sequences.items()])
    _write_table(out / "per_attribute.csv", ["attribute", "sequences", "prec_at_20", "auc"],
                 [[t, sum(t in a for a in report.attributes.values()), c.prec_at_20, c.auc]
                  for t, c in attrs.items()])
    _write_table(out / "aggregate.csv", ["protocol", "sequences", "prec_at_20", "auc"],
                 [[report.protocol, len(report.sequences), agg.prec_at_20, agg.auc]])
    _write_table(out / "curves.csv",
                 ["sequence"] + [f"p{int(t)}" for t in PRECISION_THRESHOLDS]
                 + [f"s{t:.2f}" for t in SUCCESS_THRESHOLDS],
                 [[n, *map(float, c.precision), *map(float, c.success)]
                  for n, c in {**report.sequences, "ALL": agg}.items()], fmt=".17g")

    named = {"ALL": agg, **{f"[{t}]": c for t, c in attrs.items()}}
    _plot(out / "precision.svg", PRECISION_THRESHOLDS, {k: c.precision for k, c in named.items()},
          "location error threshold (px)", "precision", lambda y: float(y[20]),
          f"precision plots of {report.protocol.upper()}")
    _plot(out / "success.svg", SUCCESS_THRESHOLDS, {k: c.success for k, c in named.items()},
          "overlap threshold", "success rate", lambda y: float(y.mean()),
          f"success plots of {report.protocol.upper()}")
    return out
