"""Decoupled cross-attention over text and material-image tokens.

The image branch is scaled by the material transfer force and gated per query
position by a binary mask at the attention level's resolution, so material
features reach only the object region while text attention shapes the whole
image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import BinaryMask, ValidationError


def attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.

    queries: (n, d), keys: (m, d), values: (m, dv) -> (n, dv).
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValidationError("keys", f"key dim {keys.shape[-1]} != query dim {queries.shape[-1]}")
    if keys.shape[0] != values.shape[0]:
        raise ValidationError("values", f"{values.shape[0]} values for {keys.shape[0]} keys")
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    return torch.softmax(scores, dim=-1) @ values


@dataclass
class AttentionInputs:
    """Inputs of one decoupled cross-attention call.

    queries: (n, d) latent-feature queries.
    text_keys/text_values: (m, d)/(m, dv) from the text conditioning.
    image_keys/image_values: (m', d)/(m', dv) from the material-image tokens.
    lam: material transfer force, scales the image branch only.
    level_mask: binary mask at this attention level; its cell count must equal
    the query count. None means no gating (all queries receive material).
    """

    queries: torch.Tensor
    text_keys: torch.Tensor
    text_values: torch.Tensor
    image_keys: torch.Tensor
    image_values: torch.Tensor
    lam: float
    level_mask: BinaryMask | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lam", f"material transfer force must be >= 0, got {self.lam}")
        n = self.queries.shape[0]
        if self.level_mask is not None:
            cells = self.level_mask.height * self.level_mask.width
            if cells != n:
                raise ValidationError(
                    "level_mask",
                    f"mask has {cells} cells but there are {n} queries",
                )
        if self.text_values.shape[-1] != self.image_values.shape[-1]:
            raise ValidationError(
                "image_values",
                f"value dim {self.image_values.shape[-1]} != text value dim {self.text_values.shape[-1]}",
            )


def decoupled_attention(inputs: AttentionInputs) -> torch.Tensor:
    """Text attention plus the lam-scaled, mask-gated material attention.

    Output row q is Attn(Q,K,V)[q] + lam * m[q] * Attn(Q,K',V')[q] where m is
    the per-query gate from the level mask. The text branch is never gated.
    With lam = 0 or an all-zero mask the text attention is returned unchanged.
    """
    text_out = attention(inputs.queries, inputs.text_keys, inputs.text_values)
    if inputs.lam == 0:
        return text_out
    if inputs.level_mask is not None and not inputs.level_mask.nonempty:
        return text_out
    image_out = attention(inputs.queries, inputs.image_keys, inputs.image_values)
    if inputs.level_mask is not None:
        gate = torch.from_numpy(inputs.level_mask.values.reshape(-1, 1).copy()).to(image_out)
        image_out = gate * image_out
    return text_out + inputs.lam * image_out


def lambda_schedule(lam_base: float, step_index: int, ramp_steps: int | None = None) -> float:
    """Per-step material transfer force; constant by default.

    With ramp_steps set, the force ramps linearly from lam_base/ramp_steps at
    the first step up to lam_base, then stays there.
    """
    if lam_base < 0:
        raise ValidationError("lam_base", f"must be >= 0, got {lam_base}")
    if ramp_steps is None:
        return lam_base
    if ramp_steps < 1:
        raise ValidationError("ramp_steps", f"must be >= 1, got {ramp_steps}")
    return lam_base * min(1.0, (step_index + 1) / ramp_steps)
