"""Configuration dataclasses and the flat ``section.key = value`` config format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class FeatureConfig:
    log_sigma: float = 2.0
    log_kernel_size: int = 13
    search_scale: float = 2.2
    input_size: int = 224
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    backbone: str = "test"
    # channel divisor for the seeded test backbone (1 = full VGG-16 widths)
    backbone_width_divisor: int = 16
    backbone_seed: int = 0
    # activation gain of the test backbone's taps
    backbone_gain: float = 10.0
    layers: tuple[str, ...] = ("conv4_3", "conv5_3")

    def __post_init__(self):
        if self.log_sigma <= 0:
            raise ConfigError("log_sigma must be positive")
        if self.log_kernel_size < 3 or self.log_kernel_size % 2 == 0:
            raise ConfigError("log_kernel_size must be an odd integer >= 3")
        if tuple(self.layers) != ("conv4_3", "conv5_3"):
            raise ConfigError(
                "only the two-layer (conv4_3, conv5_3) feature set is supported; "
                "hypercolumn stacks of three or more layers were rejected as an ablation"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    momentum: float = 0.6
    weight_decay: float = 0.005
    iterations: int = 50
    update_iterations: int = 10
    num_random: int = 8
    max_shift_frac: float = 0.3
    label_sigma_factor: float = 0.3
    threshold_fraction: float = 0.5
    resample_per_iteration: bool = True
    widths: tuple[int, int, int] = (128, 64, 64)
    dtype: str = "float32"
    # std of the Gaussian kernel initializer; None -> He-normal
    init_std: float | None = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.num_random < 1:
            raise ConfigError("num_random must be >= 1")


@dataclass
class ICARConfig:
    rho: float = 1.0
    xi: float = 0.5
    gamma: float = 1.0
    eta: float = 1.0
    max_iters: int = 200
    tol: float = 1e-6
    whiten_eps: float = 1e-8
    # None -> computed once by Gauss-Hermite quadrature
    gauss_moment: float | None = None
    # optional cap on whitened dimensions (None keeps every component above the floor)
    max_components: int | None = None

    def __post_init__(self):
        for name in ("rho", "xi", "gamma", "eta", "tol", "whiten_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.gauss_moment is None:
            from dnt.icar import gaussian_logcosh_moment

            self.gauss_moment = gaussian_logcosh_moment()


@dataclass
class TrackerConfig:
    lam: float = 0.4
    theta: float = 0.45
    num_candidates: int = 600
    period: int = 10
    K: int = 10
    motion_var: tuple[float, float, float] = (10.0, 10.0, 0.01)
    scale_clamp: tuple[float, float] = (0.5, 2.0)
    # "relative": (mu_C - c) / mu_C > theta ; "deviation": |mu_C - c| > theta ;
    # "literal": mu_C - c < theta
    anomaly_mode: str = "relative"
    # per-stream normalization before fusion: "area" | "max" | "none"
    stream_norm: str = "area"
    # subtracted from the ICA-R map before candidate scoring ("mean" or a number)
    score_offset: str = "mean"
    # rescale candidate sums to the previous target size before area weighting
    canonical: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if self.num_candidates < 1:
            raise ConfigError("num_candidates must be >= 1")
        if any(v < 0 for v in self.motion_var):
            raise ConfigError("motion variances must be non-negative")
        if self.anomaly_mode not in ("literal", "deviation", "relative"):
            raise ConfigError(f"unknown anomaly_mode {self.anomaly_mode!r}")
        if self.stream_norm not in ("area", "max", "none"):
            raise ConfigError(f"unknown stream_norm {self.stream_norm!r}")


@dataclass
class DNTConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    icar: ICARConfig = field(default_factory=ICARConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data_root: str | None = None

    def __post_init__(self):
        if self.data_root is None:
            self.data_root = os.environ.get("DNT_DATA")


_SECTIONS = ("features", "train", "icar", "tracker")


def _parse_value(raw: str, current: Any, name: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected boolean, got {raw!r}")
    if isinstance(current, tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").replace(",", " ").split()]
        kinds = [type(c) for c in current] if current else [str] * len(parts)
        if len(kinds) != len(parts) and len(set(kinds)) == 1:
            kinds = [kinds[0]] * len(parts)
        if len(kinds) != len(parts):
            raise ConfigError(f"{name}: expected {len(current)} values, got {len(parts)}")
        return tuple(k(p) for k, p in zip(kinds, parts))
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        for cast in (int, float):
            try:
                return cast(raw)
            except ValueError:
                pass
    return raw


def apply_overrides(cfg: DNTConfig, pairs: dict[str, str]) -> DNTConfig:
    """Return a new config with ``section.key`` string overrides applied."""
    sections = {s: dataclasses.asdict(getattr(cfg, s)) for s in _SECTIONS}
    top = {"data_root": cfg.data_root}
    for key, raw in pairs.items():
        if key in top:
            top[key] = raw.strip() or None
            continue
        if "." not in key:
            raise ConfigError(f"config key {key!r} must be of the form section.key")
        section, name = key.split(".", 1)
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _parse_value(raw, sections[section][name], key)
    # defaults may have been computed (gauss_moment); keep them unless overridden
    return DNTConfig(
        features=FeatureConfig(**sections["features"]),
        train=TrainConfig(**sections["train"]),
        icar=ICARConfig(**sections["icar"]),
        tracker=TrackerConfig(**sections["tracker"]),
        data_root=top["data_root"],
    )


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, **overrides: str) -> DNTConfig:
    pairs = parse_config_text(Path(path).read_text()) if path else {}
    pairs.update(overrides)
    return apply_overrides(DNTConfig(), pairs)


def dump_config(cfg: DNTConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{section}.{key} = {value}")
    lines.append(f"data_root = {cfg.data_root or ''}")
    return "\n".join(lines) + "\n"
