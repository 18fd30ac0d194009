"""Training configuration and strict key=value parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .diffgeom import HEATMAP_MODES, THICKNESS_MODES
from .masking import ConfigError


def _opt(default, help: str, note: str = "", choices=None):
    return field(default=default, metadata={"help": help, "note": note, "choices": choices})


@dataclass
class TrainConfig:
    image_size: int = _opt(64, "image side length in pixels", "reference setting 128; 64 keeps CPU runs short")
    n_keypoints: int = _opt(8, "number of keypoints K", "reference settings use 4 to 32")
    sigma2: float = _opt(5e-5, "edge thickness sigma^2 in normalized units", "reference setting 5e-5")
    thickness_mode: str = _opt(
        "fixed", "edge thickness parameterization", "ablation: shared / independent learnable thickness", THICKNESS_MODES
    )
    heatmap_mode: str = _opt(
        "max_combined", "how edges combine into the map", "ablation: edge-specific channels, keypoints only", HEATMAP_MODES
    )
    learnable_alpha: bool = _opt(True, "learn the masked-image scale alpha", "ablation: fixed alpha = 1")
    patch_px: int = _opt(8, "mask cell side length in pixels", "image_size / 8 keeps an 8x8 cell grid")
    mask_ratio: float = _opt(0.8, "fraction of mask cells hidden", "reference setting 0.8")
    lr: float = _opt(1e-4, "Adam learning rate", "reference setting 1e-4")
    beta1: float = _opt(0.9, "Adam beta1", "reference setting 0.9")
    beta2: float = _opt(0.99, "Adam beta2", "reference setting 0.99")
    edge_lr_mult: float = _opt(512.0, "learning-rate multiplier for edge weights", "reference setting x512")
    pixel_loss_weight: float = _opt(0.1, "weight of the pixel MSE term", "0 gives the feature-only loss")
    batch: int = _opt(16, "images per step", "reference setting 64")
    iters: int = _opt(3000, "training steps", "reference setting 20k at 128x128")
    seed: int = _opt(0, "seed for initialization, batches and masks", "")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "n_keypoints", "patch_px", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iters < 0:
            raise ConfigError(f"iters must be non-negative, got {self.iters}")
        if self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.image_size % self.patch_px:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_px {self.patch_px}")
        if self.image_size % 8:
            raise ConfigError(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.thickness_mode not in THICKNESS_MODES:
            raise ConfigError(f"thickness_mode must be one of {THICKNESS_MODES}")
        if self.heatmap_mode not in HEATMAP_MODES:
            raise ConfigError(f"heatmap_mode must be one of {HEATMAP_MODES}")
        if self.heatmap_mode != "keypoints_only" and self.n_keypoints < 2:
            raise ConfigError("edge heatmap modes need n_keypoints >= 2")
        if self.lr < 0 or self.edge_lr_mult < 0 or self.pixel_loss_weight < 0:
            raise ConfigError("lr, edge_lr_mult and pixel_loss_weight must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(k, v) for k, v in d.items()})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value, types: dict[str, type] | None = None):
    types = types or _field_types()
    typ = types.get(key)
    if typ is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if typ is bool:
            return parse_bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path, allowed: set[str]) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out
