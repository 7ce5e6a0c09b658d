"""Per-stream adaptation network: three conv layers plus a 1x1 heat-map head.

The network maps a backbone feature stack (C x h x w) to a single-channel map in (0, 1)
of the same spatial size. Weights live in a plain dict of float64 tensors so that the
three training objectives can return exact autograd gradients.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from dnt.config import TrainConfig
from dnt.features import FeatureStack, HeatMap, ImagePatch, InputError, Layer, crop_patch

log = logging.getLogger(__name__)

KERNELS = (7, 5, 3, 1)
PARAM_NAMES = tuple(f"{layer}.{kind}" for layer in ("conv1", "conv2", "conv3", "head")
                    for kind in ("weight", "bias"))

Params = dict[str, torch.Tensor]


@dataclass
class DualNetWeights:
    params: Params
    stream_id: Layer

    @property
    def in_channels(self) -> int:
        return self.params["conv1.weight"].shape[1]

    def copy(self) -> "DualNetWeights":
        return DualNetWeights({k: v.detach().clone() for k, v in self.params.items()}, self.stream_id)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].detach().numpy().ravel() for k in PARAM_NAMES])

    def norm_sq(self) -> float:
        return float(sum((v.double() ** 2).sum() for v in self.params.values()))


@dataclass
class GaussianTargetMap:
    values: np.ndarray
    center: tuple[float, float]  # (row, col) in map index coordinates
    sigmas: tuple[float, float]

    @property
    def heatmap(self) -> HeatMap:
        return HeatMap(self.values, normalized=True)


@dataclass
class TrainSample:
    """Backbone features of one patch together with its training label."""

    features: np.ndarray  # C x h x w
    label: np.ndarray  # h x w


@dataclass
class PatchSet:
    base: TrainSample
    randoms: list[TrainSample] = field(default_factory=list)


def init_weights(in_channels: int, stream_id: Layer, widths=(128, 64, 64), seed: int = 0,
                 dtype=torch.float64, std: float | None = None) -> DualNetWeights:
    """Gaussian kernels (He-normal when ``std`` is None), small head, zero biases; seeded."""
    gen = torch.Generator().manual_seed(seed)
    chans = (in_channels, *widths, 1)
    params: Params = {}
    for i, (name, k) in enumerate(zip(("conv1", "conv2", "conv3", "head"), KERNELS)):
        c_in, c_out = chans[i], chans[i + 1]
        scale = 0.01 if name == "head" else std if std is not None else np.sqrt(2.0 / (c_in * k * k))
        params[f"{name}.weight"] = (torch.randn((c_out, c_in, k, k), generator=gen, dtype=torch.float64) * scale).to(dtype)
        params[f"{name}.bias"] = torch.zeros(c_out, dtype=dtype)
    return DualNetWeights(params, stream_id)


def forward_tensor(params: Params, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched forward. Returns (heat B x h x w, trunk activations B x C3 x h x w)."""
    for name, k in zip(("conv1", "conv2", "conv3"), KERNELS):
        x = F.relu(F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=k // 2))
    heat = torch.sigmoid(F.conv2d(x, params["head.weight"], params["head.bias"]))
    return heat[:, 0], x


def _as_batch(features: list[np.ndarray], dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(features))).to(dtype)


def forward(W: DualNetWeights, g_V: FeatureStack) -> HeatMap:
    heat, _ = forward_full(W, g_V)
    return heat


def forward_full(W: DualNetWeights, g_V: FeatureStack) -> tuple[HeatMap, np.ndarray]:
    """Heat map and the conv3 trunk activations for one stack."""
    if g_V.layer_id != W.stream_id:
        raise InputError(f"stream mismatch: weights {W.stream_id}, features {g_V.layer_id}")
    if g_V.values.shape[0] != W.in_channels:
        raise InputError(f"expected {W.in_channels} channels, got {g_V.values.shape[0]}")
    dtype = W.params["conv1.weight"].dtype
    with torch.no_grad():
        heat, trunk = forward_tensor(W.params, _as_batch([g_V.values], dtype))
    return HeatMap(heat[0].double().numpy()), trunk[0].double().numpy()


# ---------------------------------------------------------------- labels and patches


def gaussian_target_map(rect, dims: tuple[int, int], sigma_factor: float = 0.3) -> GaussianTargetMap:
    """Gaussian label for ``rect`` = (x, y, w, h) in continuous map coordinates.

    Cell (i, j) spans [j, j+1) x [i, i+1), so the rect centre maps to index
    coordinate centre - 0.5. Sigma is ``sigma_factor`` times the half extent.
    """
    h, w = dims
    x, y, rw, rh = rect
    c_r = min(max(y + rh / 2.0 - 0.5, 0.0), h - 1.0)
    c_c = min(max(x + rw / 2.0 - 0.5, 0.0), w - 1.0)
    s_r = max(sigma_factor * rh / 2.0, 1e-6)
    s_c = max(sigma_factor * rw / 2.0, 1e-6)
    ii = np.arange(h, dtype=np.float64)[:, None]
    jj = np.arange(w, dtype=np.float64)[None, :]
    t = np.exp(-((ii - c_r) ** 2 / (2 * s_r**2) + (jj - c_c) ** 2 / (2 * s_c**2)))
    return GaussianTargetMap(t, (c_r, c_c), (s_r, s_c))


def rect_to_map(rect, patch: ImagePatch, dims: tuple[int, int]) -> tuple[float, float, float, float]:
    """Frame rect (x, y, w, h) -> continuous coordinates of an h x w map over ``patch``."""
    sx, sy, sw, sh = patch.source_rect
    mh, mw = dims
    x, y, w, h = rect
    return ((x - sx) / sw * mw, (y - sy) / sh * mh, w / sw * mw, h / sh * mh)


def sample_random_patches(frame: np.ndarray, base: ImagePatch, N: int, max_shift: float,
                          rng: np.random.Generator) -> list[ImagePatch]:
    """Center-shifted copies of ``base``; shifts uniform in [-max_shift, max_shift]^2."""
    if N < 1:
        raise InputError("N must be >= 1")
    sx, sy, side, _ = base.source_rect
    cx, cy = sx + side / 2.0, sy + side / 2.0
    out_size = base.pixels.shape[0]
    shifts = rng.uniform(-max_shift, max_shift, size=(N, 2))
    return [crop_patch(frame, (cx + dx, cy + dy), side, out_size, base.frame_index) for dx, dy in shifts]


def threshold_map(g_D: HeatMap, fraction: float = 0.5) -> HeatMap:
    if not 0 < fraction < 1:
        raise InputError("fraction must lie in (0, 1)")
    g = g_D.values
    return HeatMap(np.where(g >= fraction * g.max(), g, 0.0), g_D.normalized)


# ---------------------------------------------------------------- losses


def _leaf(W: DualNetWeights) -> Params:
    track = torch.is_grad_enabled()
    return {k: v.detach().clone().requires_grad_(track) for k, v in W.params.items()}


def _decay(params: Params) -> torch.Tensor:
    return sum((p**2).sum() for p in params.values())


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-map mean squared distance; a, b are B x h x w."""
    return ((a - b) ** 2).flatten(1).mean(dim=1)


def _finish(loss: torch.Tensor, params: Params) -> tuple[float, Params]:
    if not loss.requires_grad:  # evaluated under torch.no_grad(): value only
        return float(loss), {}
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names])
    return float(loss.detach()), dict(zip(names, (g.detach() for g in grads)))


def _heat(params: Params, samples: list[TrainSample]) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = params["conv1.weight"].dtype
    heat, _ = forward_tensor(params, _as_batch([s.features for s in samples], dtype))
    labels = _as_batch([s.label for s in samples], dtype)
    return heat, labels


def loss_init(W: DualNetWeights, patch_set: PatchSet, beta: float) -> tuple[float, Params]:
    """Base-vs-label plus mean random-vs-label distance, plus weight decay."""
    if not patch_set.randoms:
        raise InputError("loss_init needs at least one random patch")
    params = _leaf(W)
    heat, labels = _heat(params, [patch_set.base, *patch_set.randoms])
    d = _mse(heat, labels)
    loss = d[0] + d[1:].mean() + beta * _decay(params)
    return _finish(loss, params)


def _threshold_tensor(g: torch.Tensor, fraction: float) -> torch.Tensor:
    mask = (g >= fraction * g.max()).to(g.dtype).detach()
    return g * mask


def loss_stochastic(W: DualNetWeights, best_map: np.ndarray | None, current: TrainSample,
                    randoms: list[TrainSample], phi: int, beta: float,
                    fraction: float = 0.5) -> tuple[float, Params]:
    """Event-triggered update objective.

    ``best_map`` is the stored thresholded heat map of the best tracked patch and acts
    as a constant target. ``None`` (no buffer yet) falls back to the initial objective.
    """
    if best_map is None:
        return loss_init(W, PatchSet(current, randoms), beta)
    if not randoms:
        raise InputError("loss_stochastic needs at least one random patch")
    params = _leaf(W)
    heat, labels = _heat(params, [current, *randoms])
    target = torch.from_numpy(np.asarray(best_map)).to(heat.dtype)
    loss = ((_threshold_tensor(heat[0], fraction) - target) ** 2).mean()
    if not phi:
        loss = loss + _mse(heat[:1], labels[:1])[0]
    loss = loss + _mse(heat[1:], labels[1:]).mean() + beta * _decay(params)
    return _finish(loss, params)


def loss_periodic(W: DualNetWeights, best: TrainSample, first: TrainSample,
                  beta: float) -> tuple[float, Params]:
    params = _leaf(W)
    heat, labels = _heat(params, [best, first])
    loss = _mse(heat, labels).sum() + beta * _decay(params)
    return _finish(loss, params)


# ---------------------------------------------------------------- optimisation


def sgd_step(W: DualNetWeights, grads: Params, cfg: TrainConfig,
             velocity: Params | None = None) -> tuple[DualNetWeights, Params]:
    """Momentum SGD: v' = m v - lr g ; W' = W + v'."""
    new_params, new_vel = {}, {}
    for name, p in W.params.items():
        v = velocity[name] if velocity is not None else torch.zeros_like(p)
        v = cfg.momentum * v - cfg.learning_rate * grads[name].to(p.dtype)
        new_vel[name] = v
        new_params[name] = p.detach() + v
    return DualNetWeights(new_params, W.stream_id), new_vel


LossFn = Callable[[DualNetWeights, int], tuple[float, Params]]


def train(W: DualNetWeights, loss_fn: LossFn, cfg: TrainConfig,
          iterations: int | None = None) -> tuple[DualNetWeights, list[float]]:
    """Run ``iterations`` momentum-SGD steps; ``loss_fn(W, it)`` may resample patches."""
    n = cfg.iterations if iterations is None else iterations
    velocity = None
    trace: list[float] = []
    for it in range(n):
        loss, grads = loss_fn(W, it)
        trace.append(loss)
        W, velocity = sgd_step(W, grads, cfg, velocity)
    return W, trace


# ---------------------------------------------------------------- persistence


def save_weights(W: DualNetWeights, path: str | Path) -> None:
    """Write ``<path>.bin`` (raw little-endian tensors) and ``<path>.manifest``."""
    path = Path(path)
    offset = 0
    lines = [f"stream {W.stream_id.value}"]
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in PARAM_NAMES:
            arr = W.params[name].detach().numpy().astype("<f8")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in arr.shape)
            lines.append(f"{name} {shape} float64 {offset}")
            offset += arr.nbytes
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")


def load_weights(path: str | Path, dtype=torch.float64) -> DualNetWeights:
    path = Path(path)
    blob = path.with_suffix(".bin").read_bytes()
    params: Params = {}
    stream = Layer.LAYER1
    for line in path.with_suffix(".manifest").read_text().splitlines():
        parts = line.split()
        if parts[0] == "stream":
            stream = Layer(parts[1])
            continue
        name, shape, dt, offset = parts
        dims = tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims))
        arr = np.frombuffer(blob, dtype="<f8" if dt == "float64" else dt, count=count, offset=int(offset))
        params[name] = torch.from_numpy(arr.reshape(dims).copy()).to(dtype)
    return DualNetWeights(params, stream)


def append_loss_trace(path: str | Path, trace: list[float], start: int = 0, tag: str = "") -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["iteration", "loss", "phase"])
        for i, loss in enumerate(trace):
            writer.writerow([start + i, f"{loss:.10g}", tag])
