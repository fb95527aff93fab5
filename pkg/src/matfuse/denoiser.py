"""Denoiser backends: the prediction contract and a deterministic toy model.

A backend bundles everything the samplers need from a diffusion model: noise
prediction with optional attention/feature recording, material-image token
embedding, and the pixel/latent codecs. The toy backend is a small fixed
nonlinear field in float64, built for fast CPU tests: fully deterministic,
differentiable, and wired through the same decoupled cross-attention path as
a full model, so guidance and conditioning code is exercised end to end.
"""

from __future__ import annotations

import hashlib
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import AttentionInputs, decoupled_attention
from .core import (
    LATENT_CHANNELS,
    LATENT_DOWNSCALE,
    BinaryMask,
    ImageRGB,
    LatentState,
    ValidationError,
)


class BackendLoadError(RuntimeError):
    """A backend could not be constructed from the given locator."""


@dataclass(frozen=True)
class MaterialEmbedding:
    """Token sequence produced from a material exemplar image.

    tokens: (n_tokens, dim), consumed as extra cross-attention keys/values
    by the image branch of decoupled attention.
    """

    tokens: torch.Tensor
    source_fingerprint: str

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValidationError("tokens", f"expected (n, dim), got shape {tuple(self.tokens.shape)}")


@dataclass(frozen=True)
class Conditioning:
    """What the denoiser is conditioned on for one prediction.

    mode is one of "null", "text", "text_image". The material embedding, the
    transfer force lam and the mask pyramid travel together and exist iff the
    mode is "text_image"; null conditioning ignores the text too.
    """

    mode: str
    text: str = ""
    material: MaterialEmbedding | None = None
    lam: float | None = None
    mask_pyramid: tuple[BinaryMask, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("null", "text", "text_image"):
            raise ValidationError("mode", f"unknown conditioning mode {self.mode!r}")
        has_image = self.material is not None or self.lam is not None or self.mask_pyramid is not None
        if self.mode == "text_image":
            if self.material is None or self.lam is None:
                raise ValidationError("material", "text_image conditioning needs material tokens and lam")
        elif has_image:
            raise ValidationError("material", f"{self.mode} conditioning must not carry material inputs")

    @classmethod
    def null(cls) -> "Conditioning":
        return cls(mode="null")

    @classmethod
    def from_text(cls, text: str) -> "Conditioning":
        return cls(mode="text", text=text)

    @classmethod
    def text_image(
        cls,
        text: str,
        material: MaterialEmbedding,
        lam: float,
        mask_pyramid: tuple[BinaryMask, ...] | None = None,
    ) -> "Conditioning":
        return cls(mode="text_image", text=text, material=material, lam=lam, mask_pyramid=mask_pyramid)


@dataclass(frozen=True)
class DenoiserInternals:
    """Attention maps and features recorded during one prediction.

    attention_maps: one (n, n) row-stochastic map per recorded self-attention
    layer. features: (c, h, w) activations from the fixed feature layer.
    Tensors stay attached to the autograd graph of the latent they came from.
    """

    attention_maps: tuple[torch.Tensor, ...]
    features: torch.Tensor


@dataclass(frozen=True)
class BackendMetadata:
    """Static facts a pipeline needs before calling the backend."""

    name: str
    latent_shape: tuple[int, int, int]
    attention_layer_count: int
    attention_map_shapes: tuple[tuple[int, int], ...]
    feature_shape: tuple[int, int, int]
    material_token_count: int
    material_token_dim: int
    mask_levels: tuple[tuple[int, int], ...]
    native_steps: int
    fingerprint: str


class DenoiserBackend(ABC):
    """Noise prediction plus codecs, shared by toy and pretrained models."""

    metadata: BackendMetadata
    forward_calls: int

    @abstractmethod
    def predict_noise(
        self,
        z: LatentState,
        cond: Conditioning,
        record_internals: bool = False,
        timestep: int | None = None,
    ) -> tuple[torch.Tensor, DenoiserInternals | None]:
        """Predict noise for latent z under cond.

        timestep is on the backend's native scale; samplers pass it
        explicitly, direct callers may omit it and z.t is used. Identical
        inputs give bitwise identical outputs.
        """

    @abstractmethod
    def embed_material(self, image: ImageRGB) -> MaterialEmbedding: ...

    @abstractmethod
    def encode(self, image: ImageRGB) -> LatentState: ...

    @abstractmethod
    def decode(self, z: LatentState) -> ImageRGB: ...


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


class ToyDenoiserBackend(DenoiserBackend):
    """Fixed smooth noise field with real conditioning plumbing.

    The prediction is amp * tanh(depthwise3x3(channel_mix(z))) plus a
    per-channel timestep drift plus a small conditioning term computed by
    decoupled cross-attention over the latent cells. All weights are frozen
    at construction from the seed; nothing is sampled at call time.

    The codec block-averages 8x8 pixel cells and lifts 3 channels to 4
    through a fixed orthonormal map, so decode inverts encode exactly on
    block-constant images and decoding is cellwise (equal latent cells decode
    to equal pixel blocks).

    With constant set, predict_noise returns that value everywhere instead of
    the field; inversion followed by sampling then cancels exactly, which
    pins down step algebra in tests.
    """

    # Scales keep the latent-dependence of the field weak; the round-trip
    # error of inversion followed by sampling is amplified by the inverse
    # signal rate at the noisy end, so a strong field never retraces.
    _AMP_FIELD = 0.1
    _AMP_DRIFT = 0.2
    _AMP_COND = 0.05
    _NATIVE_STEPS = 1000

    def __init__(self, seed: int = 0, image_size: tuple[int, int] = (64, 64), constant: float | None = None):
        h, w = image_size
        if h % LATENT_DOWNSCALE or w % LATENT_DOWNSCALE:
            raise ValidationError("image_size", f"dims must be divisible by {LATENT_DOWNSCALE}, got {image_size}")
        self.image_size = (h, w)
        self.constant = constant
        lh, lw = h // LATENT_DOWNSCALE, w // LATENT_DOWNSCALE
        self._latent_hw = (lh, lw)

        rng = np.random.default_rng(seed)
        t64 = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))

        # Base field weights.
        self._w_mix = t64(0.2 * rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS, 1, 1)))
        self._w_depth = t64(0.2 * rng.standard_normal((LATENT_CHANNELS, 1, 3, 3)))
        self._drift_amp = t64(self._AMP_DRIFT * rng.uniform(0.5, 1.0, LATENT_CHANNELS))
        self._drift_phase = t64(rng.uniform(0.0, np.pi, LATENT_CHANNELS))

        # Recorded internals: two pooled self-attention layers and a 1x1
        # feature head. Their scales put the energy-gradient magnitude in
        # the same range as the classifier-free delta under the default
        # energy weights, so the rescale ratio is usually inside its clamp.
        self._pool_hw = (min(lh, 8), min(lw, 8))
        n_cells = self._pool_hw[0] * self._pool_hw[1]
        self._w_attn = tuple(t64(0.15 * rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS))) for _ in range(2))
        self._w_feat = t64(0.16 * rng.standard_normal((8, LATENT_CHANNELS, 1, 1)))

        # Conditioning path: latent cells as queries, 4 tokens of dim 8 per
        # prompt or material image.
        d_model = 8
        self._token_count = 4
        self._w_query = t64(0.5 * rng.standard_normal((LATENT_CHANNELS, d_model)))
        self._w_text_key = t64(0.5 * rng.standard_normal((d_model, d_model)))
        self._w_text_value = t64(0.5 * rng.standard_normal((d_model, d_model)))
        self._w_image_key = t64(0.5 * rng.standard_normal((d_model, d_model)))
        self._w_image_value = t64(0.5 * rng.standard_normal((d_model, d_model)))
        self._w_cond_out = t64(0.5 * rng.standard_normal((d_model, LATENT_CHANNELS)))
        self._w_embed = t64(rng.standard_normal((self._token_count * d_model, 3)))
        self._b_embed = t64(0.3 * rng.standard_normal(self._token_count * d_model))
        self._d_model = d_model

        self._lift = t64(_orthonormal_columns(rng, LATENT_CHANNELS, 3))

        fp = hashlib.sha256(f"toy:{seed}:{h}x{w}:{constant}".encode()).hexdigest()[:16]
        self.metadata = BackendMetadata(
            name="toy",
            latent_shape=(LATENT_CHANNELS, lh, lw),
            attention_layer_count=2,
            attention_map_shapes=((n_cells, n_cells), (n_cells, n_cells)),
            feature_shape=(8, lh, lw),
            material_token_count=self._token_count,
            material_token_dim=d_model,
            mask_levels=((lh, lw),),
            native_steps=self._NATIVE_STEPS,
            fingerprint=fp,
        )
        self.forward_calls = 0

    def _check_latent(self, z: LatentState) -> None:
        if tuple(z.data.shape) != self.metadata.latent_shape:
            raise ValidationError(
                "z", f"latent shape {tuple(z.data.shape)} does not match backend {self.metadata.latent_shape}"
            )

    def _prompt_tokens(self, text: str) -> torch.Tensor:
        """Deterministic (n_tokens, d_model) embedding of a prompt string."""
        digest = hashlib.sha256(text.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return torch.from_numpy(rng.standard_normal((self._token_count, self._d_model)))

    def _base_field(self, x: torch.Tensor) -> torch.Tensor:
        mixed = F.conv2d(x.unsqueeze(0), self._w_mix)
        spatial = F.conv2d(mixed, self._w_depth, padding=1, groups=LATENT_CHANNELS)
        return self._AMP_FIELD * torch.tanh(spatial.squeeze(0))

    def _drift(self, timestep: int) -> torch.Tensor:
        t_frac = timestep / (self._NATIVE_STEPS - 1)
        return (self._drift_amp * torch.sin(np.pi * t_frac + self._drift_phase)).reshape(-1, 1, 1)

    def _cond_term(self, x: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        if cond.mode == "null":
            return torch.zeros_like(x)
        lh, lw = self._latent_hw
        queries = x.reshape(LATENT_CHANNELS, lh * lw).transpose(0, 1) @ self._w_query
        text_tokens = self._prompt_tokens(cond.text)
        text_keys = text_tokens @ self._w_text_key
        text_values = text_tokens @ self._w_text_value
        if cond.mode == "text":
            out = decoupled_attention(
                AttentionInputs(
                    queries=queries,
                    text_keys=text_keys,
                    text_values=text_values,
                    image_keys=text_keys[:0],
                    image_values=text_values[:0],
                    lam=0.0,
                )
            )
        else:
            out = decoupled_attention(
                AttentionInputs(
                    queries=queries,
                    text_keys=text_keys,
                    text_values=text_values,
                    image_keys=cond.material.tokens @ self._w_image_key,
                    image_values=cond.material.tokens @ self._w_image_value,
                    lam=cond.lam,
                    level_mask=self._level_mask(cond),
                )
            )
        # Linear head keeps the prediction exactly affine in lam.
        cond_map = (out @ self._w_cond_out).transpose(0, 1).reshape(LATENT_CHANNELS, lh, lw)
        return self._AMP_COND * cond_map

    def _level_mask(self, cond: Conditioning) -> BinaryMask | None:
        if cond.mask_pyramid is None:
            return None
        for level in cond.mask_pyramid:
            if (level.height, level.width) == self._latent_hw:
                return level
        raise ValidationError(
            "mask_pyramid", f"no level matches the latent grid {self._latent_hw[0]}x{self._latent_hw[1]}"
        )

    def _internals(self, x: torch.Tensor) -> DenoiserInternals:
        pooled = F.adaptive_avg_pool2d(x.unsqueeze(0), self._pool_hw).squeeze(0)
        tokens = pooled.reshape(LATENT_CHANNELS, -1).transpose(0, 1)
        maps = tuple(
            torch.softmax(tokens @ w @ tokens.transpose(0, 1) / np.sqrt(LATENT_CHANNELS), dim=-1)
            for w in self._w_attn
        )
        features = F.conv2d(x.unsqueeze(0), self._w_feat).squeeze(0)
        return DenoiserInternals(attention_maps=maps, features=features)

    def predict_noise(
        self,
        z: LatentState,
        cond: Conditioning,
        record_internals: bool = False,
        timestep: int | None = None,
    ) -> tuple[torch.Tensor, DenoiserInternals | None]:
        self._check_latent(z)
        self.forward_calls += 1
        x = z.data
        t = timestep if timestep is not None else min(z.t, self._NATIVE_STEPS - 1)
        internals = self._internals(x) if record_internals else None
        if self.constant is not None:
            return torch.full_like(x, float(self.constant)), internals
        noise = self._base_field(x) + self._drift(t) + self._cond_term(x, cond)
        return noise, internals

    def embed_material(self, image: ImageRGB) -> MaterialEmbedding:
        mean_rgb = torch.from_numpy(image.pixels.mean(axis=(0, 1)))
        tokens = (self._w_embed @ mean_rgb + self._b_embed).reshape(self._token_count, self._d_model)
        fp = hashlib.sha256(image.pixels.tobytes()).hexdigest()[:16]
        return MaterialEmbedding(tokens=tokens, source_fingerprint=fp)

    def encode(self, image: ImageRGB) -> LatentState:
        if (image.height, image.width) != self.image_size:
            raise ValidationError(
                "image", f"size {image.height}x{image.width} does not match backend {self.image_size}"
            )
        lh, lw = self._latent_hw
        s = LATENT_DOWNSCALE
        blocks = image.pixels.reshape(lh, s, lw, s, 3).mean(axis=(1, 3))
        centered = torch.from_numpy(blocks - 0.5)
        z = torch.einsum("ck,hwk->chw", self._lift, centered)
        return LatentState(data=z, t=0)

    def decode(self, z: LatentState) -> ImageRGB:
        self._check_latent(z)
        rgb = torch.einsum("ck,chw->hwk", self._lift, z.data.detach()) + 0.5
        rgb = rgb.clamp(0.0, 1.0).numpy()
        pixels = np.repeat(np.repeat(rgb, LATENT_DOWNSCALE, axis=0), LATENT_DOWNSCALE, axis=1)
        return ImageRGB(pixels=np.ascontiguousarray(pixels))


def make_toy_backend(
    seed: int = 0, image_size: tuple[int, int] = (64, 64), constant: float | None = None
) -> ToyDenoiserBackend:
    return ToyDenoiserBackend(seed=seed, image_size=image_size, constant=constant)


_SD_COMPONENTS = ("unet", "vae", "text_encoder", "tokenizer", "scheduler")
_ADAPTER_NAMES = ("ip_adapter.safetensors", "ip-adapter_sd15.safetensors", "ip-adapter_sd15.bin")


def resolve_weights_dir(weights_locator: str | None) -> str:
    located = weights_locator or os.environ.get("MATFUSE_WEIGHTS_DIR")
    if not located:
        raise BackendLoadError(
            "no weights directory: pass a locator or set MATFUSE_WEIGHTS_DIR"
        )
    return located


def load_pretrained_backend(weights_locator: str | None = None, device: str = "cpu") -> DenoiserBackend:
    """Build the full diffusion backend from a local weights directory.

    The directory must hold the standard component subdirectories plus an
    image encoder and adapter weights for the image branch of cross
    attention. Missing pieces fail fast with the component named, before any
    heavyweight import happens.
    """
    weights_dir = resolve_weights_dir(weights_locator)
    if not os.path.isdir(weights_dir):
        raise BackendLoadError(f"weights directory not found: {weights_dir}")
    for name in _SD_COMPONENTS:
        if not os.path.isdir(os.path.join(weights_dir, name)):
            raise BackendLoadError(f"missing model component {name!r} in {weights_dir}")
    if not os.path.isdir(os.path.join(weights_dir, "image_encoder")):
        raise BackendLoadError(f"image-prompt adapter unavailable: no image_encoder in {weights_dir}")
    if not any(os.path.isfile(os.path.join(weights_dir, n)) for n in _ADAPTER_NAMES):
        raise BackendLoadError(
            f"image-prompt adapter unavailable: none of {', '.join(_ADAPTER_NAMES)} in {weights_dir}"
        )
    try:
        from .pretrained import PretrainedBackend
    except ImportError as exc:
        raise BackendLoadError(f"pretrained extras not installed: {exc}") from exc
    return PretrainedBackend(weights_dir, device=device)
