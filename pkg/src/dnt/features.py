"""Patch cropping, backbone feature taps, LoG boundary maps and prior-map integration."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy import ndimage
from torch import nn

log = logging.getLogger(__name__)


class Layer(enum.Enum):
    LAYER1 = "conv4_3"
    LAYER2 = "conv5_3"


class ModelUnavailableError(RuntimeError):
    """Raised when pretrained backbone weights cannot be loaded."""


class InputError(ValueError):
    pass


@dataclass
class ImagePatch:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    source_rect: tuple[float, float, float, float]  # x, y, w, h in frame pixels
    frame_index: int = 0
    # fraction of the patch area that lies outside the frame (zero padded)
    padded_fraction: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InputError(f"patch must be H x W x 3, got {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise InputError("patch must be non-empty")

    def frame_to_patch(self, x: float, y: float) -> tuple[float, float]:
        """Frame coordinates -> continuous patch pixel coordinates."""
        sx, sy, sw, sh = self.source_rect
        h, w = self.pixels.shape[:2]
        return (x - sx) / sw * w, (y - sy) / sh * h


@dataclass
class FeatureStack:
    values: np.ndarray  # C x h x w
    layer_id: Layer
    stride: int

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise InputError(f"feature stack must be C x h x w with C > 0, got {self.values.shape}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class HeatMap:
    values: np.ndarray  # h x w
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 2:
            raise InputError(f"heat map must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("heat map contains non-finite values")


# ---------------------------------------------------------------- images


def load_frame(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB frame file to float64 in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def save_gray_png(values: np.ndarray, path: str | Path) -> None:
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    cv2.imwrite(str(path), np.round(v * 255).astype(np.uint8))


def crop_patch(
    frame: np.ndarray,
    center: tuple[float, float],
    side: float,
    out_size: int,
    frame_index: int = 0,
) -> ImagePatch:
    """Crop a square region of ``side`` frame pixels around ``center`` and resize.

    Out-of-frame pixels are zero. With ``side == out_size`` and an integer-aligned
    region this is an exact pixel copy.
    """
    if side <= 0 or out_size <= 0:
        raise InputError("side and out_size must be positive")
    cx, cy = center
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    s = side / out_size
    # dst (u, v) -> src (x, y): x = s*u + x0 + s/2 - 1/2
    m = np.array([[s, 0.0, x0 + 0.5 * s - 0.5], [0.0, s, y0 + 0.5 * s - 0.5]])
    src = np.ascontiguousarray(frame, dtype=np.float64)
    pixels = cv2.warpAffine(
        src,
        m,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    fh, fw = frame.shape[:2]
    ix = max(0.0, min(x0 + side, fw) - max(x0, 0.0))
    iy = max(0.0, min(y0 + side, fh) - max(y0, 0.0))
    return ImagePatch(
        pixels=pixels,
        source_rect=(x0, y0, side, side),
        frame_index=frame_index,
        padded_fraction=1.0 - ix * iy / (side * side),
    )


def to_gray(pixels: np.ndarray) -> np.ndarray:
    return pixels @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------- LoG


def log_kernel(sigma: float, kernel_size: int) -> np.ndarray:
    """Sampled Laplacian-of-Gaussian kernel, shifted to sum exactly to zero."""
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise InputError("kernel_size must be an odd integer >= 3")
    if sigma <= 0:
        raise InputError("sigma must be positive")
    half = kernel_size // 2
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r2 = (xx**2 + yy**2) / (2.0 * sigma**2)
    k = -1.0 / (np.pi * sigma**4) * (1.0 - r2) * np.exp(-r2)
    return k - k.mean()


def log_response(gray: np.ndarray, sigma: float, kernel_size: int) -> np.ndarray:
    """Signed LoG response, reflect-padded, same size as ``gray``."""
    return ndimage.convolve(gray, log_kernel(sigma, kernel_size), mode="reflect")


def minmax(values: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= eps:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def log_boundary_map(patch: ImagePatch, sigma: float = 2.0, kernel_size: int = 13) -> HeatMap:
    if not np.all(np.isfinite(patch.pixels)):
        raise InputError("patch contains non-finite pixels")
    resp = np.abs(log_response(to_gray(patch.pixels), sigma, kernel_size))
    return HeatMap(minmax(resp), normalized=True)


# ---------------------------------------------------------------- integration


def resize_map(values: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    if values.shape == tuple(dims):
        return values.astype(np.float64, copy=False)
    h, w = dims
    return cv2.resize(values.astype(np.float64), (w, h), interpolation=cv2.INTER_LINEAR)


def integrate(boundary: HeatMap, features: FeatureStack) -> FeatureStack:
    b = resize_map(boundary.values, features.spatial)
    if not np.all(np.isfinite(features.values)):
        raise InputError("feature stack contains non-finite values")
    return FeatureStack(features.values * b[None], features.layer_id, features.stride)


def channel_mean(features: FeatureStack) -> HeatMap:
    return HeatMap(minmax(features.values.mean(axis=0)), normalized=True)


# ---------------------------------------------------------------- backbones

# VGG-16 convolutional trunk; "M" is a 2x2 max pool
VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)
_TAP_CONV_INDEX = {Layer.LAYER1: 10, Layer.LAYER2: 13}


class VGGTaps(nn.Module):
    """VGG-16 conv trunk returning post-ReLU activations of conv4_3 and conv5_3."""

    def __init__(self, width_divisor: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        self.taps: dict[int, Layer] = {}
        c_in, n_conv = 3, 0
        for item in VGG16_PLAN:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            c_out = max(1, int(item) // width_divisor)
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=False)]
            n_conv += 1
            for layer, idx in _TAP_CONV_INDEX.items():
                if n_conv == idx:
                    self.taps[len(layers) - 1] = layer
            c_in = c_out
        self.features = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> dict[Layer, torch.Tensor]:
        out = {}
        for i, mod in enumerate(self.features):
            x = mod(x)
            if i in self.taps:
                out[self.taps[i]] = x
                if len(out) == len(self.taps):
                    break
        return out


class Backbone:
    """Frozen feature extractor exposing the two tapped layers."""

    strides = {Layer.LAYER1: 8, Layer.LAYER2: 16}

    def __init__(self, net: VGGTaps, input_size: int = 224, pixel_mean=(0.485, 0.456, 0.406),
                 pixel_std=(0.229, 0.224, 0.225), dtype=torch.float32, output_scale: float = 1.0):
        self.net = net.eval().to(dtype)
        self.output_scale = output_scale
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.input_size = input_size
        self.dtype = dtype
        self._mean = torch.tensor(pixel_mean, dtype=dtype).view(1, 3, 1, 1)
        self._std = torch.tensor(pixel_std, dtype=dtype).view(1, 3, 1, 1)

    def _prepare(self, patch: ImagePatch) -> np.ndarray:
        px = patch.pixels
        if px.shape[:2] != (self.input_size, self.input_size):
            px = cv2.resize(px, (self.input_size, self.input_size), interpolation=cv2.INTER_LINEAR)
        return px

    def forward_batch(self, patches: list[ImagePatch]) -> list[dict[Layer, FeatureStack]]:
        arr = np.stack([self._prepare(p) for p in patches]).transpose(0, 3, 1, 2)
        x = torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype)
        x = (x - self._mean) / self._std
        with torch.no_grad():
            taps = self.net(x)
        if self.output_scale != 1.0:
            taps = {k: t * self.output_scale for k, t in taps.items()}
        out = []
        for b in range(len(patches)):
            out.append({
                layer: FeatureStack(t[b].double().numpy(), layer, self.strides[layer])
                for layer, t in taps.items()
            })
        return out

    def forward(self, patch: ImagePatch) -> dict[Layer, FeatureStack]:
        return self.forward_batch([patch])[0]


def seeded_test_backbone(seed: int = 0, width_divisor: int = 16, input_size: int = 224,
                         dtype=torch.float32, gain: float = 1.0, **kw) -> Backbone:
    """VGG-16-shaped backbone with fixed-seed He-initialized weights.

    ``gain`` scales the tapped activations; He init keeps them O(1) whereas pretrained
    VGG conv4_3/conv5_3 responses are an order of magnitude larger.
    """
    gen = torch.Generator().manual_seed(seed)
    net = VGGTaps(width_divisor)
    for mod in net.modules():
        if isinstance(mod, nn.Conv2d):
            fan_in = mod.in_channels * 9
            with torch.no_grad():
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                mod.bias.copy_(torch.randn(mod.bias.shape, generator=gen) * 0.01)
    return Backbone(net, input_size=input_size, dtype=dtype, output_scale=gain, **kw)


def pretrained_backbone(input_size: int = 224, **kw) -> Backbone:
    """ImageNet VGG-16 from torchvision; raises ModelUnavailableError if weights can't be loaded."""
    try:
        from torchvision.models import VGG16_Weights, vgg16

        ref = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as exc:  # download or cache failure
        raise ModelUnavailableError(f"pretrained VGG-16 weights unavailable: {exc}") from exc
    net = VGGTaps(1)
    net.features.load_state_dict(ref.features[: len(net.features)].state_dict())
    return Backbone(net, input_size=input_size, **kw)


def make_backbone(cfg) -> Backbone:
    """Build the backbone named by a FeatureConfig."""
    common = dict(input_size=cfg.input_size, pixel_mean=cfg.pixel_mean, pixel_std=cfg.pixel_std)
    if cfg.backbone == "pretrained":
        return pretrained_backbone(**common)
    if cfg.backbone == "test":
        return seeded_test_backbone(cfg.backbone_seed, cfg.backbone_width_divisor, gain=cfg.backbone_gain,
                                    **common)
    raise ModelUnavailableError(f"unknown backbone {cfg.backbone!r}")


def extract_features(backbone: Backbone, patch: ImagePatch) -> tuple[FeatureStack, FeatureStack]:
    taps = backbone.forward(patch)
    return taps[Layer.LAYER1], taps[Layer.LAYER2]
