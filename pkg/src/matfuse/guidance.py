"""Energy guidance that pulls sampling toward the inversion trajectory.

Two energies compare the current latent's recorded internals against the
reference internals from the same slot of the inverted source: a
self-attention map term preserving layout and an intermediate-feature term
preserving appearance structure. Their weighted sum is differentiated with
respect to the latent and the gradient is added to the classifier-free
prediction after rescaling to a comparable magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import LatentState, ValidationError
from .denoiser import Conditioning, DenoiserBackend, DenoiserInternals


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free combination eps_uncond + w * (eps_cond - eps_uncond).

    The difference form makes w = 0 return eps_uncond bitwise and collapses
    exactly when both predictions agree.
    """
    return eps_uncond + w * (eps_cond - eps_uncond)


def self_attention_energy(
    star: DenoiserInternals, cur: DenoiserInternals
) -> torch.Tensor:
    """Sum over recorded layers of the mean squared attention-map deviation."""
    if len(star.attention_maps) != len(cur.attention_maps):
        raise ValidationError(
            "cur", f"{len(cur.attention_maps)} attention maps against {len(star.attention_maps)} reference maps"
        )
    total = None
    for ref, now in zip(star.attention_maps, cur.attention_maps):
        if ref.shape != now.shape:
            raise ValidationError("cur", f"attention map shape {tuple(now.shape)} != reference {tuple(ref.shape)}")
        term = ((ref.detach() - now) ** 2).mean()
        total = term if total is None else total + term
    return total


def feature_energy(star: DenoiserInternals, cur: DenoiserInternals) -> torch.Tensor:
    """Mean squared deviation of the recorded feature activations."""
    if star.features.shape != cur.features.shape:
        raise ValidationError(
            "cur", f"feature shape {tuple(cur.features.shape)} != reference {tuple(star.features.shape)}"
        )
    return ((star.features.detach() - cur.features) ** 2).mean()


def guidance_energy(
    star: DenoiserInternals, cur: DenoiserInternals, v_self: float, v_feat: float
) -> torch.Tensor:
    """v_self * attention energy + v_feat * feature energy, as a scalar tensor
    still attached to the current latent's graph."""
    return v_self * self_attention_energy(star, cur) + v_feat * feature_energy(star, cur)


@dataclass(frozen=True)
class GuidanceTerms:
    """Gradient of the weighted energy with the detached scalar energies."""

    gradient: torch.Tensor
    energy_self: float
    energy_feat: float


def guidance_gradient(
    backend: DenoiserBackend,
    z: LatentState,
    y_src: str,
    star: DenoiserInternals,
    v_self: float,
    v_feat: float,
    timestep: int | None = None,
) -> GuidanceTerms:
    """Differentiate the guidance energy at z through one recording pass.

    The pass conditions on the source prompt, matching how the reference
    internals were produced. With both weights zero the energy is identically
    zero, so no pass is issued and the gradient is exactly zero.
    """
    if v_self < 0 or v_feat < 0:
        raise ValidationError("v_self", "energy weights must be >= 0")
    if v_self == 0 and v_feat == 0:
        return GuidanceTerms(gradient=torch.zeros_like(z.data), energy_self=0.0, energy_feat=0.0)
    leaf = z.data.detach().clone().requires_grad_(True)
    _, cur = backend.predict_noise(
        z.with_data(leaf), Conditioning.from_text(y_src), record_internals=True, timestep=timestep
    )
    e_self = self_attention_energy(star, cur)
    e_feat = feature_energy(star, cur)
    energy = v_self * e_self + v_feat * e_feat
    (grad,) = torch.autograd.grad(energy, leaf)
    return GuidanceTerms(
        gradient=grad.detach(), energy_self=float(e_self.detach()), energy_feat=float(e_feat.detach())
    )


def rescale_factor(
    cfg_delta: torch.Tensor, gradient: torch.Tensor, r_lower: float, r_upper: float
) -> tuple[float, float]:
    """Clamp the squared-norm ratio of the two correction terms into
    [r_lower, r_upper].

    Returns (gamma, raw ratio). A zero gradient gives an infinite ratio and
    clamps to r_upper; the zero gradient then nullifies gamma anyway.
    """
    if not 0 < r_lower <= r_upper:
        raise ValidationError("r_lower", f"need 0 < r_lower <= r_upper, got ({r_lower}, {r_upper})")
    grad_sq = float((gradient.detach() ** 2).sum())
    delta_sq = float((cfg_delta.detach() ** 2).sum())
    r_cur = delta_sq / grad_sq if grad_sq > 0 else float("inf")
    gamma = min(max(r_cur, r_lower), r_upper)
    return gamma, r_cur


def combine_noise(eps_cfg: torch.Tensor, gradient: torch.Tensor, gamma: float) -> torch.Tensor:
    """Final prediction eps_cfg + gamma * gradient."""
    return eps_cfg + gamma * gradient


def guidance_active(t: int, T: int, tau_g: int) -> bool:
    """Guidance applies during the first tau_g of T sampling steps, counting
    from the noisy end: step index T - t is below tau_g."""
    if not 1 <= t <= T:
        raise ValidationError("t", f"slot must be in [1, {T}], got {t}")
    return (T - t) < tau_g


def blending_active(t: int, T: int, tau_m: int) -> bool:
    """Background blending applies during the first tau_m of T sampling steps."""
    if not 1 <= t <= T:
        raise ValidationError("t", f"slot must be in [1, {T}], got {t}")
    return (T - t) < tau_m
