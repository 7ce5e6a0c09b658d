"""Generated tracking sequences with analytic ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]
    rects: np.ndarray  # n x 4, (x, y, w, h) top-left
    occluded: np.ndarray  # n, bool
    attributes: list[str] = field(default_factory=list)
    name: str = "synthetic"


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """High-contrast colored checker texture with noise."""
    cells = 4
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy * cells // size + xx * cells // size) % 2).astype(np.float64)
    base = np.stack([0.9 * checker + 0.05, 0.2 + 0.6 * (1 - checker), 0.15 + 0.3 * checker], axis=-1)
    return np.clip(base + rng.normal(0, 0.04, base.shape), 0, 1)


def make_sequence(
    n_frames: int = 50,
    frame_size: tuple[int, int] = (240, 320),
    target_size: int = 40,
    max_speed: float = 4.0,
    scale_range: tuple[int, int] = (10, 40),
    final_scale: float = 1.2,
    occlusion: tuple[int, int] | None = (28, 33),
    static: bool = False,
    seed: int = 0,
) -> SyntheticSequence:
    """Textured square moving over a smooth background.

    ``occlusion`` is a half-open frame range during which a flat occluder fully covers
    the target. The scale grows linearly to ``final_scale`` over ``scale_range``.
    """
    rng = np.random.default_rng(seed)
    H, W = frame_size
    bg = ndimage.gaussian_filter(rng.normal(0, 1, (H, W, 3)), sigma=(12, 12, 0))
    bg = 0.45 + 0.08 * bg / bg.std()
    tex = _texture(target_size * 2, rng)

    cx, cy = W * 0.4, H * 0.45
    phase = rng.uniform(0, 2 * np.pi)
    frames, rects, occ = [], [], []
    for t in range(n_frames):
        if t > 0 and not static:
            ang = phase + 0.08 * t
            cx += max_speed * 0.9 * np.cos(ang)
            cy += max_speed * 0.5 * np.sin(1.3 * ang)
        a, b = scale_range
        s = 1.0 + (final_scale - 1.0) * np.clip((t - a) / max(b - a, 1), 0, 1)
        size = target_size * s
        x0, y0 = cx - size / 2, cy - size / 2
        img = bg.copy()
        n = int(round(size))
        patch = cv2.resize(tex, (n, n), interpolation=cv2.INTER_AREA)
        xi, yi = int(round(x0)), int(round(y0))
        img[yi : yi + n, xi : xi + n] = patch
        covered = occlusion is not None and occlusion[0] <= t < occlusion[1]
        if covered:
            m = int(round(size * 0.35))
            img[yi - m : yi + n + m, xi - m : xi + n + m] = (0.35, 0.38, 0.42)
        frames.append(np.clip(img, 0, 1))
        rects.append((float(xi), float(yi), float(n), float(n)))
        occ.append(covered)
    attrs = ["SV", "OCC"] if occlusion else ["SV"]
    return SyntheticSequence(frames, np.array(rects), np.array(occ), attrs)


def write_otb(seq: SyntheticSequence, root: str | Path) -> Path:
    """Write ``seq`` in the OTB layout: img/0001.jpg..., groundtruth_rect.txt, attrs.txt."""
    root = Path(root) / seq.name
    (root / "img").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, 1):
        bgr = cv2.cvtColor(np.round(frame * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(root / "img" / f"{i:04d}.png"), bgr)
    lines = [",".join(str(int(round(v))) for v in r) for r in seq.rects]
    (root / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    if seq.attributes:
        (root / "attrs.txt").write_text(" ".join(seq.attributes) + "\n")
    return root
