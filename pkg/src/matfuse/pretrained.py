"""Latent-diffusion backend over pretrained weights with an image-prompt adapter.

Implements the same backend contract as the toy model against a standard
UNet/VAE/CLIP checkpoint laid out as component subdirectories, plus adapter
weights that add an image branch to every cross-attention layer. The heavy
imports live in this module only; `load_pretrained_backend` checks the weights
directory before importing it, so toy-backed runs never pay for them.

Decoupled cross-attention is installed as custom attention processors: the
text branch is the stock attention computation, the image branch attends over
projected material tokens through the adapter's per-layer key/value maps, and
the two outputs are summed with the image side scaled by lam and gated by the
mask level whose cell count matches the query count. Self-attention maps from
a fixed set of coarse layers and the final up-block features are captured per
forward pass when recording is requested, attached to the autograd graph of
the input latent so energy gradients flow.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch
import torch.nn as nn

from diffusers import AutoencoderKL, UNet2DConditionModel
from transformers import (
    CLIPImageProcessor,
    CLIPTextModel,
    CLIPTokenizer,
    CLIPVisionModelWithProjection,
)

from .core import LATENT_DOWNSCALE, ImageRGB, LatentState, ValidationError
from .denoiser import (
    _ADAPTER_NAMES,
    BackendLoadError,
    BackendMetadata,
    Conditioning,
    DenoiserBackend,
    DenoiserInternals,
    MaterialEmbedding,
)

# The sampler's schedule is built from these constants; a checkpoint trained
# under a different noise schedule would silently invert to the wrong
# trajectory, so a mismatch is a load error rather than a warning.
_EXPECTED_BETA_SCHEDULE = "scaled_linear"
_EXPECTED_BETA_START = 0.00085
_EXPECTED_BETA_END = 0.012

# Self-attention maps are recorded from the coarse layers only: one per
# attention-bearing resolution at 1/8, 1/4 and 1/2 of the latent grid. The
# full-resolution maps are quadratically larger and add little geometry
# signal relative to their memory cost.
_RECORD_ATTN_LAYERS = (
    "mid_block.attentions.0.transformer_blocks.0.attn1.processor",
    "up_blocks.1.attentions.0.transformer_blocks.0.attn1.processor",
    "up_blocks.2.attentions.0.transformer_blocks.0.attn1.processor",
)


class _CallContext:
    """Mutable per-forward state shared between the backend and processors."""

    __slots__ = ("image_tokens", "lam", "gates", "record", "attn_maps", "features")

    def __init__(self):
        self.reset()

    def reset(self):
        self.image_tokens = None
        self.lam = 0.0
        self.gates = {}
        self.record = False
        self.attn_maps = {}
        self.features = None


def _attention(attn, hidden_states, encoder_hidden_states, attention_mask):
    """Stock single-branch attention, returning (out, probs) pre-projection."""
    query = attn.to_q(hidden_states)
    if encoder_hidden_states is None:
        encoder_hidden_states = hidden_states
    elif attn.norm_cross:
        encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)
    key = attn.to_k(encoder_hidden_states)
    value = attn.to_v(encoder_hidden_states)
    query = attn.head_to_batch_dim(query)
    key = attn.head_to_batch_dim(key)
    value = attn.head_to_batch_dim(value)
    probs = attn.get_attention_scores(query, key, attention_mask)
    out = attn.batch_to_head_dim(torch.bmm(probs, value))
    return out, probs


class _RecordingSelfAttnProcessor:
    """Default self-attention that can capture its head-averaged map."""

    def __init__(self, ctx: _CallContext, name: str):
        self._ctx = ctx
        self._name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch, channel, height * width).transpose(1, 2)
        batch, seq_len, _ = hidden_states.shape
        attention_mask = attn.prepare_attention_mask(attention_mask, seq_len, batch)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        out, probs = _attention(attn, hidden_states, None, attention_mask)
        if self._ctx.record:
            # (batch*heads, n, n) -> head-mean (n, n); batch is always 1 here.
            self._ctx.attn_maps[self._name] = probs.reshape(batch, -1, *probs.shape[1:]).mean(dim=1)[0]

        out = attn.to_out[1](attn.to_out[0](out))
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(batch, channel, height, width)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class _DecoupledCrossAttnProcessor:
    """Text attention plus a lam-scaled, mask-gated image-token branch."""

    def __init__(self, ctx: _CallContext, to_k_ip: nn.Linear, to_v_ip: nn.Linear):
        self._ctx = ctx
        self.to_k_ip = to_k_ip
        self.to_v_ip = to_v_ip

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch, channel, height * width).transpose(1, 2)
        batch, seq_len, _ = (
            hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        )
        attention_mask = attn.prepare_attention_mask(attention_mask, seq_len, batch)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        out, _ = _attention(attn, hidden_states, encoder_hidden_states, attention_mask)

        ctx = self._ctx
        if ctx.image_tokens is not None and ctx.lam != 0.0:
            ip_key = attn.head_to_batch_dim(self.to_k_ip(ctx.image_tokens))
            ip_value = attn.head_to_batch_dim(self.to_v_ip(ctx.image_tokens))
            query = attn.head_to_batch_dim(attn.to_q(hidden_states))
            ip_probs = attn.get_attention_scores(query, ip_key, None)
            ip_out = attn.batch_to_head_dim(torch.bmm(ip_probs, ip_value))
            n_queries = ip_out.shape[1]
            gate = ctx.gates.get(n_queries)
            if gate is not None:
                ip_out = ip_out * gate
            elif ctx.gates:
                raise ValidationError(
                    "mask_pyramid", f"no mask level matches {n_queries} attention queries"
                )
            out = out + ctx.lam * ip_out

        out = attn.to_out[1](attn.to_out[0](out))
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(batch, channel, height, width)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


def _load_adapter_state(weights_dir: str) -> dict:
    for name in _ADAPTER_NAMES:
        path = os.path.join(weights_dir, name)
        if not os.path.isfile(path):
            continue
        if name.endswith(".safetensors"):
            from safetensors.torch import load_file

            flat = load_file(path)
            state = {"image_proj": {}, "ip_adapter": {}}
            for key, tensor in flat.items():
                group, _, rest = key.partition(".")
                state.setdefault(group, {})[rest] = tensor
            return state
        return torch.load(path, map_location="cpu")
    raise BackendLoadError(f"image-prompt adapter unavailable: no adapter weights in {weights_dir}")


class PretrainedBackend(DenoiserBackend):
    """Backend over a standard latent-diffusion checkpoint directory.

    Weights are frozen; gradients flow only through the latent. All
    computation is float32 on the given device. Images are fixed at the size
    given at construction (default 512 x 512).
    """

    def __init__(self, weights_dir: str, device: str = "cpu", image_size: tuple[int, int] = (512, 512)):
        h, w = image_size
        if h % (LATENT_DOWNSCALE * 8) or w % (LATENT_DOWNSCALE * 8):
            raise ValidationError(
                "image_size", f"dims must be divisible by {LATENT_DOWNSCALE * 8}, got {image_size}"
            )
        self.image_size = (h, w)
        self.device = torch.device(device)

        self._check_scheduler(weights_dir)
        try:
            self.unet = UNet2DConditionModel.from_pretrained(os.path.join(weights_dir, "unet"))
            self.vae = AutoencoderKL.from_pretrained(os.path.join(weights_dir, "vae"))
            self.text_encoder = CLIPTextModel.from_pretrained(os.path.join(weights_dir, "text_encoder"))
            self.tokenizer = CLIPTokenizer.from_pretrained(os.path.join(weights_dir, "tokenizer"))
            self.image_encoder = CLIPVisionModelWithProjection.from_pretrained(
                os.path.join(weights_dir, "image_encoder")
            )
        except (OSError, ValueError) as exc:
            raise BackendLoadError(f"corrupt model component: {exc}") from exc
        try:
            self.image_processor = CLIPImageProcessor.from_pretrained(
                os.path.join(weights_dir, "image_encoder")
            )
        except (OSError, ValueError):
            self.image_processor = CLIPImageProcessor()

        for module in (self.unet, self.vae, self.text_encoder, self.image_encoder):
            module.to(self.device).eval().requires_grad_(False)

        adapter_state = _load_adapter_state(weights_dir)
        self._ctx = _CallContext()
        self._install_image_proj(adapter_state)
        self._install_processors(adapter_state)
        self._prompt_cache: dict[str, torch.Tensor] = {}

        lh, lw = h // LATENT_DOWNSCALE, w // LATENT_DOWNSCALE
        self._latent_hw = (lh, lw)
        self._scaling = float(getattr(self.vae.config, "scaling_factor", 0.18215))
        map_sizes = ((lh // 8) * (lw // 8), (lh // 4) * (lw // 4), (lh // 2) * (lw // 2))
        self.metadata = BackendMetadata(
            name="pretrained",
            latent_shape=(int(self.unet.config.in_channels), lh, lw),
            attention_layer_count=len(_RECORD_ATTN_LAYERS),
            attention_map_shapes=tuple((n, n) for n in map_sizes),
            feature_shape=(int(self.unet.config.block_out_channels[0]), lh, lw),
            material_token_count=self._n_image_tokens,
            material_token_dim=int(self.unet.config.cross_attention_dim),
            mask_levels=((lh, lw), (lh // 2, lw // 2), (lh // 4, lw // 4), (lh // 8, lw // 8)),
            native_steps=self._native_steps,
            fingerprint=self._fingerprint(weights_dir, adapter_state),
        )
        self.forward_calls = 0

        self._features_hook = self.unet.up_blocks[-1].register_forward_hook(self._capture_features)

    def _check_scheduler(self, weights_dir: str) -> None:
        path = os.path.join(weights_dir, "scheduler", "scheduler_config.json")
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendLoadError(f"corrupt model component: scheduler ({exc})") from exc
        schedule = cfg.get("beta_schedule")
        start, end = cfg.get("beta_start"), cfg.get("beta_end")
        if (
            schedule != _EXPECTED_BETA_SCHEDULE
            or abs(start - _EXPECTED_BETA_START) > 1e-9
            or abs(end - _EXPECTED_BETA_END) > 1e-9
        ):
            raise BackendLoadError(
                "unsupported noise schedule: "
                f"{schedule} [{start}, {end}] (sampler assumes {_EXPECTED_BETA_SCHEDULE} "
                f"[{_EXPECTED_BETA_START}, {_EXPECTED_BETA_END}])"
            )
        self._native_steps = int(cfg.get("num_train_timesteps", 1000))

    def _install_image_proj(self, adapter_state: dict) -> None:
        try:
            proj = adapter_state["image_proj"]
            proj_weight = proj["proj.weight"]
            norm_weight = proj["norm.weight"]
        except KeyError as exc:
            raise BackendLoadError(f"image-prompt adapter unavailable: missing tensor {exc}") from exc
        cross_dim = int(self.unet.config.cross_attention_dim)
        if proj_weight.shape[0] % cross_dim:
            raise BackendLoadError(
                "image-prompt adapter unavailable: projection rows "
                f"{proj_weight.shape[0]} not a multiple of token dim {cross_dim}"
            )
        self._n_image_tokens = proj_weight.shape[0] // cross_dim
        clip_dim = int(proj_weight.shape[1])
        encoder_dim = int(self.image_encoder.config.projection_dim)
        if clip_dim != encoder_dim:
            raise BackendLoadError(
                f"image-prompt adapter unavailable: projection expects {clip_dim}-d image "
                f"embeddings, encoder produces {encoder_dim}-d"
            )
        self._image_proj = nn.Linear(clip_dim, self._n_image_tokens * cross_dim)
        self._image_norm = nn.LayerNorm(cross_dim)
        self._image_proj.load_state_dict({"weight": proj_weight, "bias": proj["proj.bias"]})
        self._image_norm.load_state_dict({"weight": norm_weight, "bias": proj["norm.bias"]})
        for module in (self._image_proj, self._image_norm):
            module.to(self.device).eval().requires_grad_(False)

    def _install_processors(self, adapter_state: dict) -> None:
        """Wire recording self-attention and decoupled cross-attention in.

        Adapter key/value tensors are stored under odd integer prefixes in
        checkpoint traversal order, one per cross-attention layer; mismatched
        layouts fail here rather than at first use.
        """
        from diffusers.models.attention_processor import AttnProcessor

        ip_state = adapter_state.get("ip_adapter", {})
        cross_dim = int(self.unet.config.cross_attention_dim)
        processors = {}
        key_id = 1
        for name in self.unet.attn_processors:
            if name.endswith("attn2.processor"):
                try:
                    k_weight = ip_state[f"{key_id}.to_k_ip.weight"]
                    v_weight = ip_state[f"{key_id}.to_v_ip.weight"]
                except KeyError:
                    raise BackendLoadError(
                        "image-prompt adapter unavailable: adapter weights do not match "
                        f"the attention layout (no entry {key_id} for {name})"
                    ) from None
                to_k = nn.Linear(cross_dim, k_weight.shape[0], bias=False)
                to_v = nn.Linear(cross_dim, v_weight.shape[0], bias=False)
                to_k.load_state_dict({"weight": k_weight})
                to_v.load_state_dict({"weight": v_weight})
                to_k.to(self.device).requires_grad_(False)
                to_v.to(self.device).requires_grad_(False)
                processors[name] = _DecoupledCrossAttnProcessor(self._ctx, to_k, to_v)
                key_id += 2
            elif name in _RECORD_ATTN_LAYERS:
                processors[name] = _RecordingSelfAttnProcessor(self._ctx, name)
            else:
                processors[name] = AttnProcessor()
        missing = [n for n in _RECORD_ATTN_LAYERS if n not in processors]
        if missing:
            raise BackendLoadError(f"missing model component {missing[0]!r} (recorded attention layer)")
        self.unet.set_attn_processor(processors)

    def _fingerprint(self, weights_dir: str, adapter_state: dict) -> str:
        shapes = sorted(
            (f"{group}.{key}", tuple(t.shape))
            for group, tensors in adapter_state.items()
            for key, t in tensors.items()
        )
        payload = json.dumps(
            {
                "dir": os.path.abspath(weights_dir),
                "unet": dict(self.unet.config),
                "adapter": [[k, list(s)] for k, s in shapes],
            },
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def _capture_features(self, module, inputs, output):
        if self._ctx.record:
            out = output[0] if isinstance(output, tuple) else output
            self._ctx.features = out[0]

    def _encode_prompt(self, text: str) -> torch.Tensor:
        cached = self._prompt_cache.get(text)
        if cached is not None:
            return cached
        ids = self.tokenizer(
            text,
            padding="max_length",
            max_length=self.tokenizer.model_max_length,
            truncation=True,
            return_tensors="pt",
        ).input_ids.to(self.device)
        with torch.no_grad():
            embeds = self.text_encoder(ids).last_hidden_state
        self._prompt_cache[text] = embeds
        return embeds

    def _gates(self, cond: Conditioning) -> dict:
        if cond.mask_pyramid is None:
            return {}
        gates = {}
        for level in cond.mask_pyramid:
            gate = torch.from_numpy(level.values.astype(np.float32)).reshape(-1, 1)
            gates[level.height * level.width] = gate.to(self.device)
        return gates

    def predict_noise(
        self,
        z: LatentState,
        cond: Conditioning,
        record_internals: bool = False,
        timestep: int | None = None,
    ) -> tuple[torch.Tensor, DenoiserInternals | None]:
        expected = self.metadata.latent_shape
        if tuple(z.data.shape) != expected:
            raise ValidationError("z", f"latent shape {tuple(z.data.shape)} does not match backend {expected}")
        self.forward_calls += 1
        t = timestep if timestep is not None else min(z.t, self._native_steps - 1)

        ctx = self._ctx
        ctx.reset()
        ctx.record = record_internals
        text = "" if cond.mode == "null" else cond.text
        encoder_states = self._encode_prompt(text)
        if cond.mode == "text_image":
            ctx.image_tokens = self._project_material(cond.material)
            ctx.lam = float(cond.lam)
            ctx.gates = self._gates(cond)

        sample = z.data.to(device=self.device, dtype=self.unet.dtype).unsqueeze(0)
        noise = self.unet(sample, t, encoder_hidden_states=encoder_states).sample[0]

        internals = None
        if record_internals:
            maps = tuple(ctx.attn_maps[name] for name in _RECORD_ATTN_LAYERS)
            internals = DenoiserInternals(attention_maps=maps, features=ctx.features)
        ctx.reset()
        return noise.to(z.data.dtype), internals

    def _project_material(self, material: MaterialEmbedding) -> torch.Tensor:
        tokens = material.tokens.to(device=self.device, dtype=self.unet.dtype)
        expected = (self.metadata.material_token_count, self.metadata.material_token_dim)
        if tuple(tokens.shape) != expected:
            raise ValidationError("material", f"token shape {tuple(tokens.shape)} does not match {expected}")
        return tokens.unsqueeze(0)

    def embed_material(self, image: ImageRGB) -> MaterialEmbedding:
        pixels = np.round(image.pixels * 255.0).astype(np.uint8)
        inputs = self.image_processor(images=pixels, return_tensors="pt").pixel_values.to(self.device)
        with torch.no_grad():
            clip_embeds = self.image_encoder(inputs).image_embeds
            tokens = self._image_norm(
                self._image_proj(clip_embeds).reshape(-1, self.metadata.material_token_dim)
            )
        fp = hashlib.sha256(image.pixels.tobytes()).hexdigest()[:16]
        return MaterialEmbedding(tokens=tokens, source_fingerprint=fp)

    def encode(self, image: ImageRGB) -> LatentState:
        if (image.height, image.width) != self.image_size:
            raise ValidationError(
                "image", f"size {image.height}x{image.width} does not match backend {self.image_size}"
            )
        x = torch.from_numpy(image.pixels).to(device=self.device, dtype=self.vae.dtype)
        x = (x * 2.0 - 1.0).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            # The distribution mode keeps encoding deterministic.
            latent = self.vae.encode(x).latent_dist.mode() * self._scaling
        return LatentState(data=latent[0], t=0)

    def decode(self, z: LatentState) -> ImageRGB:
        data = z.data.detach().to(device=self.device, dtype=self.vae.dtype)
        with torch.no_grad():
            x = self.vae.decode(data.unsqueeze(0) / self._scaling).sample[0]
        pixels = (x / 2.0 + 0.5).clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy().astype(np.float64)
        return ImageRGB(pixels=np.ascontiguousarray(pixels))
