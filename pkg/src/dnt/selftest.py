"""Scaled-down experiments behind ``dnt selftest`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from dnt import dualnet
from dnt.config import DNTConfig, ICARConfig, load_config
from dnt.dualnet import PatchSet, TrainSample
from dnt.features import Layer, make_backbone
from dnt.icar import MixedSignals, solve, whiten
from dnt.synthetic import make_sequence
from dnt.tracking import iou, track_sequence


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------- ICA-R recovery


def icar_trial(seed: int, P: int = 2000, snr_db: float = 10.0, cfg: ICARConfig | None = None) -> float:
    """|corr| between the extracted signal and source 1 for one random mixture.

    Sources: two Laplacian (super-Gaussian) and two uniform (sub-Gaussian), unit variance.
    The reference is source 1 plus white noise at ``snr_db``.
    """
    cfg = cfg or ICARConfig()
    rng = np.random.default_rng(seed)
    S = np.vstack([
        rng.laplace(0, 1 / np.sqrt(2), (2, P)),
        rng.uniform(-np.sqrt(3), np.sqrt(3), (2, P)),
    ])
    A = rng.normal(size=(4, 4))
    X = A @ S
    ref = S[0] + rng.normal(0, np.sqrt(10 ** (-snr_db / 10)), P)
    Z, _ = whiten(MixedSignals(X, (1, P)), cfg.whiten_eps)
    res = solve(Z, ref, cfg)
    return abs(float(np.corrcoef(res.y, S[0])[0, 1]))


def icar_recovery(n_trials: int = 100, seed: int = 0) -> tuple[np.ndarray, float]:
    cfg = ICARConfig()
    t0 = time.perf_counter()
    corrs = np.array([icar_trial(seed + i, cfg=cfg) for i in range(n_trials)])
    return corrs, time.perf_counter() - t0


# ---------------------------------------------------------------- gradient fidelity


def _tiny_samples(rng: np.random.Generator, n: int, channels: int, size: int) -> list[TrainSample]:
    out = []
    for _ in range(n):
        feats = rng.normal(size=(channels, size, size))
        label = dualnet.gaussian_target_map(
            (rng.uniform(1, 4), rng.uniform(1, 4), 3.0, 3.0), (size, size)).values
        out.append(TrainSample(feats, label))
    return out


def _loss_fns(rng: np.random.Generator, channels: int, size: int, beta: float):
    base, *randoms = _tiny_samples(rng, 4, channels, size)
    best, first = _tiny_samples(rng, 2, channels, size)
    best_map = rng.uniform(0, 1, (size, size)) * (rng.uniform(size=(size, size)) > 0.5)
    return {
        "loss_init": lambda W: dualnet.loss_init(W, PatchSet(base, randoms), beta),
        "loss_stochastic": lambda W: dualnet.loss_stochastic(W, best_map, base, randoms, 0, beta),
        "loss_periodic": lambda W: dualnet.loss_periodic(W, best, first, beta),
    }


def fd_relative_error(loss_fn, W: dualnet.DualNetWeights, h: float = 1e-6) -> float:
    """max over parameters of |analytic - central difference| / max(|analytic|, |fd|, 1e-8)."""
    _, grads = loss_fn(W)
    worst = 0.0
    W = W.copy()
    for name, p in W.params.items():
        g = grads[name].detach().numpy().ravel()
        flat = p.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up, _ = loss_fn(W)
                flat[i] = orig - h
                down, _ = loss_fn(W)
                flat[i] = orig
            fd = (up - down) / (2 * h)
            scale = max(abs(g[i]), abs(fd), 1e-8)
            worst = max(worst, abs(g[i] - fd) / scale)
    return worst


def gradient_check(n_draws: int = 20, seed: int = 0, channels: int = 2, size: int = 8,
                   beta: float = 0.005) -> dict[str, float]:
    """Worst relative error per loss over ``n_draws`` random parameter draws (float64)."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for draw in range(n_draws):
        W = dualnet.init_weights(channels, Layer.LAYER1, (channels,) * 3, seed + draw, torch.float64, std=0.5)
        # random biases so no ReLU sits exactly at its kink
        gen = torch.Generator().manual_seed(10_000 + draw)
        for k in W.params:
            if k.endswith("bias"):
                W.params[k] = torch.randn(W.params[k].shape, generator=gen, dtype=torch.float64) * 0.3
            if k == "head.weight":
                W.params[k] = torch.randn(W.params[k].shape, generator=gen, dtype=torch.float64)
        for name, fn in _loss_fns(rng, channels, size, beta).items():
            worst[name] = max(worst.get(name, 0.0), fd_relative_error(fn, W))
    return worst


# ---------------------------------------------------------------- first-frame adaptation


def init_adaptation(cfg: DNTConfig | None = None, seed: int = 0) -> dict[Layer, list[float]]:
    """Initial training traces on the first frame of a generated sequence."""
    from dnt.tracking import Tracker

    cfg = cfg or load_config(**{"train.learning_rate": "1e-2"})
    seq = make_sequence(n_frames=1, occlusion=None, seed=seed)
    tracker = Tracker(cfg, make_backbone(cfg.features))
    tracker.init(seq.frames[0], seq.rects[0])
    return tracker.init_trace


# ---------------------------------------------------------------- synthetic tracking


@dataclass
class TrackingRun:
    rects: np.ndarray
    ious: np.ndarray
    occluded: np.ndarray
    anomalies: np.ndarray
    seconds: float

    @property
    def mean_visible_iou(self) -> float:
        return float(self.ious[~self.occluded].mean())

    @property
    def anomalies_in_window(self) -> int:
        return int((self.anomalies & self.occluded).sum())

    @property
    def frozen_on_anomaly(self) -> bool:
        """Every anomalous frame reports the previous frame's rect."""
        idx = np.flatnonzero(self.anomalies)
        return all(np.array_equal(self.rects[i], self.rects[i - 1]) for i in idx if i > 0)


def synthetic_tracking(cfg: DNTConfig | None = None, seed: int = 0) -> TrackingRun:
    cfg = cfg or load_config(**{"train.learning_rate": "1e-2"})
    seq = make_sequence(seed=seed)
    backbone = make_backbone(cfg.features)
    t0 = time.perf_counter()
    reports = list(track_sequence(seq.frames, seq.rects[0], cfg, backbone))
    seconds = time.perf_counter() - t0
    rects = np.array([r.rect for r in reports])
    ious = np.array([iou(r, g) for r, g in zip(rects, seq.rects)])
    anomalies = np.array([r.anomaly for r in reports])
    return TrackingRun(rects, ious, seq.occluded, anomalies, seconds)


# ---------------------------------------------------------------- driver


def run_all(quick: bool = False) -> list[Check]:
    """The ICA-R recovery, gradient-check and synthetic-tracking checks."""
    checks = []
    corrs, secs = icar_recovery(20 if quick else 100)
    need = int(np.ceil(0.95 * len(corrs)))
    good = int((corrs > 0.95).sum())
    checks.append(Check("ICA-R recovery", good >= need and secs < 30,
                        f"{good}/{len(corrs)} trials with |corr| > 0.95 (need {need}), {secs:.1f}s"))

    worst = gradient_check(3 if quick else 20)
    checks.append(Check("gradient check", max(worst.values()) < 1e-4,
                        ", ".join(f"{k} {v:.1e}" for k, v in worst.items())))

    run_a = synthetic_tracking()
    run_b = synthetic_tracking()
    ok = (run_a.mean_visible_iou >= 0.5 and run_a.anomalies_in_window >= 1
          and np.array_equal(run_a.rects, run_b.rects) and run_a.seconds < 180)
    checks.append(Check("synthetic tracking", ok,
                        f"mean visible IoU {run_a.mean_visible_iou:.3f}, "
                        f"{run_a.anomalies_in_window} anomalies in occlusion, "
                        f"deterministic={np.array_equal(run_a.rects, run_b.rects)}, {run_a.seconds:.0f}s"))
    return checks
