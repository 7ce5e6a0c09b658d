"""Candidate sampling, confidence scoring, drift/occlusion detection and the online tracker."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from dnt import dualnet
from dnt.config import DNTConfig, TrackerConfig
from dnt.dualnet import DualNetWeights, PatchSet, TrainSample
from dnt.features import (
    Backbone,
    FeatureStack,
    HeatMap,
    ImagePatch,
    InputError,
    Layer,
    channel_mean,
    crop_patch,
    integrate,
    log_boundary_map,
    resize_map,
)
from dnt.icar import DegenerateInputError, extract

log = logging.getLogger(__name__)

LAYERS = (Layer.LAYER1, Layer.LAYER2)


@dataclass
class TargetState:
    x: float  # centre, frame pixels
    y: float
    sigma: float  # scale relative to the initial target size
    w0: float
    h0: float

    def __post_init__(self):
        if self.sigma <= 0 or self.w0 <= 0 or self.h0 <= 0:
            raise InputError("target state must have positive scale and size")

    @property
    def rect(self) -> tuple[float, float, float, float]:
        w, h = self.w0 * self.sigma, self.h0 * self.sigma
        return (self.x - w / 2, self.y - h / 2, w, h)

    @property
    def area(self) -> float:
        return self.w0 * self.h0 * self.sigma**2

    @classmethod
    def from_rect(cls, rect) -> "TargetState":
        x, y, w, h = rect
        if w <= 0 or h <= 0:
            raise InputError(f"degenerate rect {rect}")
        return cls(x + w / 2, y + h / 2, 1.0, w, h)

    def with_xys(self, x: float, y: float, sigma: float) -> "TargetState":
        return TargetState(float(x), float(y), float(sigma), self.w0, self.h0)


@dataclass
class MotionModel:
    var_x: float = 10.0
    var_y: float = 10.0
    var_sigma: float = 0.01

    @property
    def std(self) -> np.ndarray:
        return np.sqrt([self.var_x, self.var_y, self.var_sigma])


@dataclass
class MemoryEntry:
    samples: dict[Layer, TrainSample]
    confidence: float
    thresholded: dict[Layer, np.ndarray]
    frame_index: int


@dataclass
class TrackerMemory:
    K: int = 10
    mu_C: float = 0.0
    n_conf: int = 0
    buffer: deque = field(default_factory=deque)
    first: MemoryEntry | None = None
    frame_index: int = 1

    def push(self, entry: MemoryEntry) -> None:
        self.buffer.append(entry)
        while len(self.buffer) > self.K:
            self.buffer.popleft()

    def record_confidence(self, value: float) -> None:
        self.n_conf += 1
        self.mu_C += (value - self.mu_C) / self.n_conf


# ---------------------------------------------------------------- scoring primitives


def sample_candidates(prev: TargetState, motion: MotionModel, R: int, rng: np.random.Generator,
                      clamp: tuple[float, float] = (0.5, 2.0)) -> np.ndarray:
    """R draws of (x, y, sigma) from N(prev, diag(motion)); sigma clamped relative to prev."""
    mean = np.array([prev.x, prev.y, prev.sigma])
    out = mean + rng.standard_normal((R, 3)) * motion.std
    out[:, 2] = np.clip(out[:, 2], clamp[0] * prev.sigma, clamp[1] * prev.sigma)
    return out


def _coverage(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Overlap length of [lo, hi) with each unit cell [j, j+1), j < n. Shapes (R,) -> (R, n)."""
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi[:, None], j + 1) - np.maximum(lo[:, None], j), 0.0, None)


def candidate_confidences(v: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Coverage-weighted sums of ``v`` inside each map-coordinate rect (R x 4: x, y, w, h)."""
    rects = np.atleast_2d(np.asarray(rects, dtype=np.float64))
    h, w = v.shape
    wx = _coverage(rects[:, 0], rects[:, 0] + rects[:, 2], w)
    wy = _coverage(rects[:, 1], rects[:, 1] + rects[:, 3], h)
    return np.einsum("ri,ij,rj->r", wy, v, wx)


def candidate_confidence(v: HeatMap | np.ndarray, rect_in_map) -> float:
    values = v.values if isinstance(v, HeatMap) else v
    return float(candidate_confidences(values, np.asarray(rect_in_map)[None])[0])


def scale_weight(C, area_candidate, area_prev_best):
    return area_candidate / area_prev_best * C


def fuse_and_select(scores1: np.ndarray, scores2: np.ndarray, lam: float) -> tuple[int, float]:
    fused = lam * np.asarray(scores1) + (1 - lam) * np.asarray(scores2)
    best = int(np.argmax(fused))  # first maximum wins
    return best, float(fused[best])


def detect_anomaly(memory: TrackerMemory, C_star: float, area_prev_best: float, theta: float,
                   mode: str = "literal") -> bool:
    """Drift/occlusion test on the area-normalized winning confidence."""
    if memory.n_conf == 0:
        return False
    gap = memory.mu_C - C_star / area_prev_best
    if mode == "literal":
        return gap < theta
    if mode == "deviation":
        return abs(gap) > theta
    if mode == "relative":
        # drop relative to the running mean; independent of the maps' dynamic range
        return memory.mu_C > 0 and gap / memory.mu_C > theta
    raise ValueError(f"unknown anomaly mode {mode!r}")


def select_best_tracked(memory: TrackerMemory) -> MemoryEntry:
    if not memory.buffer:
        if memory.first is None:
            raise InputError("tracker memory is empty")
        return memory.first
    confs = [e.confidence for e in memory.buffer]
    return memory.buffer[int(np.argmax(confs))]


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return min(inter / union, 1.0) if union > 0 else 0.0


# ---------------------------------------------------------------- tracker


@dataclass
class StreamMaps:
    g_V: FeatureStack
    heat: HeatMap
    v: HeatMap
    boundary: np.ndarray
    icar_converged: bool


@dataclass
class FrameReport:
    frame_index: int
    rect: tuple[float, float, float, float]
    C_star: float
    confidence: float
    mu_C: float
    anomaly: bool
    updates: list[str]

    def as_dict(self) -> dict:
        d = self.__dict__.copy()
        d["rect"] = [round(float(v), 3) for v in self.rect]
        d["anomaly"] = bool(self.anomaly)
        for k in ("C_star", "confidence", "mu_C"):
            d[k] = None if not np.isfinite(d[k]) else float(d[k])
        return d


class Tracker:
    """Online dual-network tracker; one instance per sequence, single-threaded."""

    def __init__(self, cfg: DNTConfig, backbone: Backbone):
        self.cfg = cfg
        self.backbone = backbone
        self.rng = np.random.default_rng(cfg.tracker.rng_seed)
        self.weights: dict[Layer, DualNetWeights] = {}
        self.memory = TrackerMemory(K=cfg.tracker.K)
        self.state: TargetState | None = None
        self.frame_index = 0
        self.init_trace: dict[Layer, list[float]] = {}
        self.update_log: list[tuple[int, str, dict[Layer, list[float]]]] = []
        self.last_maps: dict[Layer, StreamMaps] = {}
        self.motion = MotionModel(*cfg.tracker.motion_var)
        self._dtype = torch.float32 if cfg.train.dtype == "float32" else torch.float64

    # -------------------------------------------------------------- patches

    def _side(self, state: TargetState) -> float:
        _, _, w, h = state.rect
        return self.cfg.features.search_scale * max(w, h)

    def _crop(self, frame: np.ndarray, state: TargetState) -> ImagePatch:
        return crop_patch(frame, (state.x, state.y), self._side(state), self.backbone.input_size,
                          self.frame_index)

    def _samples(self, patches: list[ImagePatch], rect) -> list[dict[Layer, TrainSample]]:
        """Backbone features and Gaussian labels (for frame rect ``rect``) for each patch."""
        out = []
        for patch, taps in zip(patches, self.backbone.forward_batch(patches)):
            entry = {}
            for layer, stack in taps.items():
                m = dualnet.rect_to_map(rect, patch, stack.spatial)
                label = dualnet.gaussian_target_map(m, stack.spatial, self.cfg.train.label_sigma_factor)
                entry[layer] = TrainSample(stack.values, label.values)
            out.append(entry)
        return out

    def _randoms(self, frame: np.ndarray, base: ImagePatch, rect) -> list[dict[Layer, TrainSample]]:
        tc = self.cfg.train
        side = base.source_rect[2]
        patches = dualnet.sample_random_patches(frame, base, tc.num_random, tc.max_shift_frac * side, self.rng)
        return self._samples(patches, rect)

    # -------------------------------------------------------------- maps

    def analyze(self, patch: ImagePatch, taps: dict[Layer, FeatureStack] | None = None) -> dict[Layer, StreamMaps]:
        """Boundary map, dual-network heat map and ICA-R map for each stream."""
        fc = self.cfg.features
        boundary = log_boundary_map(patch, fc.log_sigma, fc.log_kernel_size)
        taps = taps or self.backbone.forward(patch)
        out = {}
        for layer in LAYERS:
            g_V = taps[layer]
            heat, trunk = dualnet.forward_full(self.weights[layer], g_V)
            f_E = resize_map(boundary.values, g_V.spatial)
            h_V = integrate(boundary, g_V)
            mixtures = f_E[None] * np.concatenate([heat.values[None], trunk])
            try:
                res = extract(mixtures, h_V, self.cfg.icar)
                v, conv = res.v, res.converged
            except DegenerateInputError:
                log.warning("frame %d: degenerate ICA-R input on %s, using the prior map",
                            self.frame_index, layer.value)
                v, conv = channel_mean(h_V), False
            out[layer] = StreamMaps(g_V, heat, v, f_E, conv)
        return out

    def _entry(self, frame: np.ndarray, state: TargetState, confidence: float) -> MemoryEntry:
        """Re-centre on ``state`` and store features, labels and thresholded heat maps."""
        patch = self._crop(frame, state)
        samples = self._samples([patch], state.rect)[0]
        thr = {}
        for layer, s in samples.items():
            heat, _ = dualnet.forward_full(self.weights[layer], FeatureStack(s.features, layer, 0))
            thr[layer] = dualnet.threshold_map(heat, self.cfg.train.threshold_fraction).values
        return MemoryEntry(samples, confidence, thr, self.frame_index)

    def _stream_scores(self, values: np.ndarray, patch: ImagePatch, frame_rects: np.ndarray,
                       areas: np.ndarray, prev: TargetState) -> tuple[np.ndarray, float]:
        """Scale-weighted confidences of frame rects on one map, and the previous area in map pixels.

        With ``canonical`` set, each candidate's sum is rescaled to the canonical size
        (the previous target's extent in map pixels) before the area weighting.
        """
        map_rects = np.array([dualnet.rect_to_map(r, patch, values.shape) for r in frame_rects])
        C = candidate_confidences(values, map_rects)
        mp = dualnet.rect_to_map(prev.rect, patch, values.shape)
        prev_area = mp[2] * mp[3]
        if self.cfg.tracker.canonical:
            C = C * prev_area / (map_rects[:, 2] * map_rects[:, 3])
        return scale_weight(C, areas, prev.area), prev_area

    def _confidence(self, maps: dict[Layer, StreamMaps], patch: ImagePatch, state: TargetState,
                    prev: TargetState) -> float:
        """Fused, area-normalized confidence of one state on the raw ICA-R maps."""
        total = 0.0
        rect = np.array([state.rect])
        for layer, wt in zip(LAYERS, (self.cfg.tracker.lam, 1 - self.cfg.tracker.lam)):
            c_hat, prev_area = self._stream_scores(maps[layer].v.values, patch, rect,
                                                   np.array([state.area]), prev)
            total += wt * float(c_hat[0]) / prev_area
        return total

    # -------------------------------------------------------------- training

    def _train_lockstep(self, sampler, loss_for, iterations: int, tag: str) -> dict[Layer, list[float]]:
        """Train both streams with shared per-iteration samples."""
        tc = self.cfg.train
        velocity: dict[Layer, dict | None] = {layer: None for layer in LAYERS}
        traces: dict[Layer, list[float]] = {layer: [] for layer in LAYERS}
        samples = None
        for it in range(iterations):
            if samples is None or tc.resample_per_iteration:
                samples = sampler()
            for layer in LAYERS:
                loss, grads = loss_for(layer, self.weights[layer], samples)
                traces[layer].append(loss)
                self.weights[layer], velocity[layer] = dualnet.sgd_step(
                    self.weights[layer], grads, tc, velocity[layer])
        self.update_log.append((self.frame_index, tag, traces))
        return traces

    def init(self, frame: np.ndarray, gt_rect) -> "Tracker":
        tc = self.cfg.train
        self.frame_index = 1
        self.state = TargetState.from_rect(gt_rect)
        base = self._crop(frame, self.state)
        taps = self.backbone.forward(base)
        base_samples = self._samples([base], self.state.rect)[0]
        for i, layer in enumerate(LAYERS):
            self.weights[layer] = dualnet.init_weights(
                taps[layer].values.shape[0], layer, tc.widths, tc.rng_seed + i, self._dtype, tc.init_std)

        def sampler():
            return self._randoms(frame, base, self.state.rect)

        def loss_for(layer, W, randoms):
            ps = PatchSet(base_samples[layer], [r[layer] for r in randoms])
            return dualnet.loss_init(W, ps, tc.weight_decay)

        self.init_trace = self._train_lockstep(sampler, loss_for, tc.iterations, "init")
        maps = self.analyze(base, taps)
        self.last_maps = maps
        conf = self._confidence(maps, base, self.state, self.state)
        self.memory = TrackerMemory(K=self.cfg.tracker.K)
        self.memory.record_confidence(max(conf, 0.0))
        self.memory.first = self._entry(frame, self.state, conf)
        self.memory.frame_index = 1
        return self

    def _stochastic_update(self, frame: np.ndarray, base: ImagePatch, base_taps, phi: int) -> None:
        tc = self.cfg.train
        best = select_best_tracked(self.memory)
        rect = self.state.rect
        current = self._samples([base], rect)[0]

        def sampler():
            return self._randoms(frame, base, rect)

        def loss_for(layer, W, randoms):
            return dualnet.loss_stochastic(W, best.thresholded[layer], current[layer],
                                           [r[layer] for r in randoms], phi, tc.weight_decay,
                                           tc.threshold_fraction)

        self._train_lockstep(sampler, loss_for, tc.update_iterations, "stochastic")

    def _periodic_update(self) -> None:
        tc = self.cfg.train
        best = select_best_tracked(self.memory)
        first = self.memory.first

        def loss_for(layer, W, _):
            return dualnet.loss_periodic(W, best.samples[layer], first.samples[layer], tc.weight_decay)

        self._train_lockstep(lambda: None, loss_for, tc.update_iterations, "periodic")

    # -------------------------------------------------------------- per frame

    def _score_map(self, v: np.ndarray) -> np.ndarray:
        off = self.cfg.tracker.score_offset
        if off == "mean":
            return v - v.mean()
        return v - float(off)

    def step(self, frame: np.ndarray) -> FrameReport:
        if self.state is None:
            raise InputError("tracker not initialized")
        tcfg: TrackerConfig = self.cfg.tracker
        self.frame_index += 1
        self.memory.frame_index = self.frame_index
        prev = self.state
        base = self._crop(frame, prev)
        taps = self.backbone.forward(base)
        maps = self.analyze(base, taps)
        self.last_maps = maps

        cands = sample_candidates(prev, self.motion, tcfg.num_candidates, self.rng, tcfg.scale_clamp)
        sizes = np.stack([prev.w0 * cands[:, 2], prev.h0 * cands[:, 2]], axis=1)
        frame_rects = np.column_stack([cands[:, :2] - sizes / 2, sizes])
        areas = sizes[:, 0] * sizes[:, 1]
        scores = []
        for layer in LAYERS:
            values = self._score_map(maps[layer].v.values)
            C_hat, prev_area = self._stream_scores(values, base, frame_rects, areas, prev)
            if tcfg.stream_norm == "area":
                C_hat = C_hat / prev_area
            elif tcfg.stream_norm == "max":
                top = np.abs(C_hat).max()
                C_hat = C_hat / top if top > 0 else C_hat
            scores.append(C_hat)
        best, C_star = fuse_and_select(scores[0], scores[1], tcfg.lam)
        winner = prev.with_xys(*cands[best])
        confidence = self._confidence(maps, base, winner, prev)
        # already divided by the previous area, hence area 1 here
        anomaly = detect_anomaly(self.memory, confidence, 1.0, tcfg.theta, tcfg.anomaly_mode)

        updates = []
        if anomaly:
            phi = int(iou(winner.rect, prev.rect) >= 0.5)
            self._stochastic_update(frame, base, taps, phi)
            updates.append("stochastic")
        else:
            self.state = winner
            self.memory.record_confidence(confidence)
            self.memory.push(self._entry(frame, winner, confidence))
        if tcfg.period > 0 and self.frame_index % tcfg.period == 0:
            self._periodic_update()
            updates.append("periodic")
        return FrameReport(self.frame_index, self.state.rect, C_star, confidence,
                           self.memory.mu_C, anomaly, updates)


# ---------------------------------------------------------------- sequence driver


def track_sequence(frames: Iterable[np.ndarray], init_rect, cfg: DNTConfig, backbone: Backbone,
                   out_path: str | Path | None = None, sidecar_path: str | Path | None = None,
                   debug_dir: str | Path | None = None) -> Iterator[FrameReport]:
    """Track through ``frames``; yields one report per frame (the first is the init rect).

    Rects are appended to ``out_path`` as ``x,y,w,h`` lines as they are produced.
    """
    out = open(out_path, "w") if out_path else None
    side = open(sidecar_path, "w") if sidecar_path else None
    tracker = Tracker(cfg, backbone)
    try:
        for i, frame in enumerate(frames):
            if i == 0:
                tracker.init(frame, init_rect)
                report = FrameReport(1, tracker.state.rect, float("nan"), tracker.memory.mu_C,
                                     tracker.memory.mu_C, False, ["init"])
            else:
                report = tracker.step(frame)
            if out:
                out.write(",".join(f"{v:.2f}" for v in report.rect) + "\n")
                out.flush()
            if side:
                side.write(json.dumps(report.as_dict()) + "\n")
                side.flush()
            if debug_dir:
                _dump_maps(tracker, Path(debug_dir), report.frame_index)
            yield report
    finally:
        if out:
            out.close()
        if side:
            side.close()


def _dump_maps(tracker: Tracker, root: Path, frame_index: int) -> None:
    from dnt.features import save_gray_png

    root.mkdir(parents=True, exist_ok=True)
    for layer, maps in tracker.last_maps.items():
        save_gray_png(maps.v.values, root / f"{frame_index:04d}_{layer.value}_v.png")
        ref = channel_mean(integrate(HeatMap(maps.boundary), maps.g_V)).values
        save_gray_png(ref, root / f"{frame_index:04d}_{layer.value}_ref.png")
