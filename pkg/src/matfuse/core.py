"""Shared domain types: images, binary masks, prompts, latents, and the transfer config.

All types here are immutable value objects; arrays are marked read-only after
construction so instances can be shared freely across concurrent workers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

LATENT_DOWNSCALE = 8
LATENT_CHANNELS = 4


class ValidationError(ValueError):
    """Invalid domain value; message names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


class ConfigError(ValidationError):
    """Invalid or unknown transfer-config field."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageRGB:
    """An RGB image with values in [0, 1], sides divisible by the latent downscale."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError("pixels", f"expected HxWx3 array, got shape {px.shape}")
        h, w = px.shape[:2]
        if h % LATENT_DOWNSCALE or w % LATENT_DOWNSCALE:
            raise ValidationError(
                "pixels", f"dimensions {h}x{w} must be divisible by {LATENT_DOWNSCALE}"
            )
        if not np.isfinite(px).all():
            raise ValidationError("pixels", "non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixels", "values outside [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_file(cls, path: str | Path) -> "ImageRGB":
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            px = np.asarray(rgb, dtype=np.float64) / 255.0
        return cls(px)

    @classmethod
    def zeros(cls, height: int, width: int) -> "ImageRGB":
        return cls(np.zeros((height, width, 3)))

    @classmethod
    def full(cls, height: int, width: int, rgb: Sequence[float]) -> "ImageRGB":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(rgb, dtype=np.float64)
        return cls(px)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def save(self, path: str | Path) -> None:
        Image.fromarray(self.to_uint8()).save(path)


@dataclass(frozen=True)
class BinaryMask:
    """Strictly binary H x W mask with a tag naming the space it lives in."""

    values: np.ndarray
    space: str = "pixel"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError("values", f"expected HxW array, got shape {v.shape}")
        v = v.astype(np.uint8)
        if not np.isin(v, (0, 1)).all():
            raise ValidationError("values", "mask must contain only 0 and 1")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def nonempty(self) -> bool:
        return bool(self.values.any())

    @classmethod
    def from_file(cls, path: str | Path, space: str = "pixel") -> "BinaryMask":
        """Load a single-channel mask image; 0 = background, 255 = object.

        Grayscale inputs are thresholded at 0.5 with a warning.
        """
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        if not np.isin(gray, (0.0, 1.0)).all():
            warnings.warn(f"mask {path} is not strictly binary; thresholding at 0.5")
        return cls((gray >= 0.5).astype(np.uint8), space=space)

    @classmethod
    def full(cls, height: int, width: int, space: str = "pixel") -> "BinaryMask":
        return cls(np.ones((height, width), dtype=np.uint8), space=space)

    @classmethod
    def empty(cls, height: int, width: int, space: str = "pixel") -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8), space=space)

    def save(self, path: str | Path) -> None:
        Image.fromarray(self.values * np.uint8(255), mode="L").save(path)


def downsample_mask(mask: BinaryMask, target: tuple[int, int], space: str | None = None) -> BinaryMask:
    """Max-pool a mask down to `target` = (h, w).

    A target cell is 1 iff any covered source cell is 1, so thin regions
    survive resampling. Target must divide the source dimensions evenly.
    """
    th, tw = target
    sh, sw = mask.height, mask.width
    if th <= 0 or tw <= 0:
        raise ValidationError("target", f"target {target} must be positive")
    if sh % th or sw % tw:
        raise ValidationError(
            "target", f"target {th}x{tw} does not divide source {sh}x{sw} evenly"
        )
    fh, fw = sh // th, sw // tw
    pooled = mask.values.reshape(th, fh, tw, fw).max(axis=(1, 3))
    return BinaryMask(pooled, space=space if space is not None else f"{th}x{tw}")


def mask_pyramid(mask: BinaryMask, levels: Sequence[tuple[int, int]]) -> list[BinaryMask]:
    """Downsample a mask to each attention level, one max-pooled mask per level."""
    return [
        downsample_mask(mask, lvl, space=f"attention-{lvl[0]}x{lvl[1]}") for lvl in levels
    ]


def upsample_mask(mask: BinaryMask, target: tuple[int, int], space: str = "pixel") -> BinaryMask:
    """Nearest-neighbor upsample; each mask cell becomes a constant block."""
    th, tw = target
    if th % mask.height or tw % mask.width:
        raise ValidationError("target", f"target {target} not a multiple of {mask.height}x{mask.width}")
    fh, fw = th // mask.height, tw // mask.width
    up = np.repeat(np.repeat(mask.values, fh, axis=0), fw, axis=1)
    return BinaryMask(up, space=space)


@dataclass(frozen=True)
class PromptSet:
    """Source and target text prompts plus the (empty) null prompt."""

    y_src: str
    y_trg: str
    null_prompt: str = ""

    def __post_init__(self):
        if not self.y_src:
            raise ValidationError("y_src", "source prompt must be non-empty")


@dataclass(frozen=True)
class LatentState:
    """A latent array C x h x w together with its trajectory slot index t."""

    data: torch.Tensor
    t: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError("data", f"expected CxHxW tensor, got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValidationError("data", "non-finite latent entries")
        if self.t < 0:
            raise ValidationError("t", f"timestep index {self.t} must be >= 0")

    def with_data(self, data: torch.Tensor, t: int | None = None) -> "LatentState":
        return LatentState(data, self.t if t is None else t)


@dataclass(frozen=True)
class InversionTrajectory:
    """Ordered latents for slots t = 0..T produced by deterministic inversion."""

    latents: tuple[LatentState, ...]
    y_src: str

    def __post_init__(self):
        if len(self.latents) < 2:
            raise ValidationError("latents", "trajectory needs at least two states")
        ts = [s.t for s in self.latents]
        if ts != list(range(len(self.latents))):
            raise ValidationError("latents", f"slot indices must be 0..T in order, got {ts}")

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    def __getitem__(self, t: int) -> LatentState:
        return self.latents[t]


# Reference configuration; the seven guidance/masking scalars follow the
# published default operating point for 50-step sampling.
CONFIG_DEFAULTS: dict = {
    "w": 7.5,
    "lam": 0.8,
    "v_self": 700000.0,
    "v_feat": 1500.0,
    "tau_g": 30,
    "tau_m": 40,
    "r_lower": 0.33,
    "r_upper": 3.0,
    "T": 50,
    "seed": 0,
}


@dataclass(frozen=True)
class TransferConfig:
    """All scalar knobs of a transfer run.

    w: classifier-free guidance scale.
    lam: material transfer force (image-attention multiplier), >= 0.
    v_self, v_feat: guider scales, >= 0.
    tau_g: number of leading steps with guidance active, in [0, T].
    tau_m: number of leading steps with background blending active, in [0, T].
    r_lower, r_upper: noise-rescale clamp bounds, 0 < r_lower <= r_upper.
    T: DDIM step count.  seed: RNG seed recorded for reproducibility.
    """

    w: float = CONFIG_DEFAULTS["w"]
    lam: float = CONFIG_DEFAULTS["lam"]
    v_self: float = CONFIG_DEFAULTS["v_self"]
    v_feat: float = CONFIG_DEFAULTS["v_feat"]
    tau_g: int = CONFIG_DEFAULTS["tau_g"]
    tau_m: int = CONFIG_DEFAULTS["tau_m"]
    r_lower: float = CONFIG_DEFAULTS["r_lower"]
    r_upper: float = CONFIG_DEFAULTS["r_upper"]
    T: int = CONFIG_DEFAULTS["T"]
    seed: int = CONFIG_DEFAULTS["seed"]

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T", f"step count must be >= 1, got {self.T}")
        if self.lam < 0:
            raise ConfigError("lam", f"material transfer force must be >= 0, got {self.lam}")
        if self.v_self < 0:
            raise ConfigError("v_self", f"guidance scale must be >= 0, got {self.v_self}")
        if self.v_feat < 0:
            raise ConfigError("v_feat", f"guidance scale must be >= 0, got {self.v_feat}")
        if not 0 <= self.tau_g <= self.T:
            raise ConfigError("tau_g", f"must lie in [0, T={self.T}], got {self.tau_g}")
        if not 0 <= self.tau_m <= self.T:
            raise ConfigError("tau_m", f"must lie in [0, T={self.T}], got {self.tau_m}")
        if self.r_lower <= 0:
            raise ConfigError("r_lower", f"must be > 0, got {self.r_lower}")
        if self.r_lower > self.r_upper:
            raise ConfigError(
                "r_lower", f"lower bound {self.r_lower} exceeds upper bound {self.r_upper}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def replace(self, **overrides) -> "TransferConfig":
        return replace(self, **overrides)


def make_config(overrides: Mapping | None = None) -> TransferConfig:
    """Build a TransferConfig from defaults plus the given overrides.

    Unknown keys and bound violations raise ConfigError naming the field.
    """
    overrides = dict(overrides or {})
    known = set(TransferConfig.field_names())
    for key in overrides:
        if key not in known:
            raise ConfigError(key, f"unknown config field (known: {sorted(known)})")
    int_fields = {"tau_g", "tau_m", "T", "seed"}
    cleaned = {}
    for key, value in overrides.items():
        if key in int_fields:
            iv = int(value)
            if iv != float(value):
                raise ConfigError(key, f"expected an integer, got {value!r}")
            cleaned[key] = iv
        else:
            cleaned[key] = float(value)
    return TransferConfig(**cleaned)


def load_config_file(path: str | Path) -> dict:
    """Read a flat JSON key/value config document."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config", f"expected a flat JSON object in {path}")
    return data


def config_from_json(text: str) -> TransferConfig:
    data = json.loads(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ConfigError("config", "expected a flat JSON object")
    return make_config(data)
