"""End-to-end material transfer: invert, then sample with guidance and masks.

One run inverts the object image under its source prompt, then samples back
down under the target prompt with material tokens attached. Inside the
guidance window the prediction is corrected by the rescaled energy gradient;
inside the blending window every freshly stepped latent has its background
cells replaced by the matching inversion latent, so untouched regions are
carried through by selection rather than re-synthesis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import torch

from .conditioning import lambda_schedule
from .core import (
    BinaryMask,
    ImageRGB,
    InversionTrajectory,
    LatentState,
    PromptSet,
    TransferConfig,
    ValidationError,
    downsample_mask,
)
from .denoiser import Conditioning, DenoiserBackend
from .guidance import (
    blending_active,
    cfg_combine,
    combine_noise,
    feature_energy,
    guidance_active,
    guidance_gradient,
    rescale_factor,
    self_attention_energy,
)
from .sampler import InversionResult, NoiseSchedule, ddim_invert, ddim_step


class CancelledRun(RuntimeError):
    """Raised when the cancel hook fires at a step boundary."""

    def __init__(self, step_index: int):
        super().__init__(f"run cancelled at step {step_index}")
        self.step_index = step_index


class NonFiniteLatentError(RuntimeError):
    """Sampling produced NaN or inf; the slot where it happened is named."""


@dataclass(frozen=True)
class TransferRequest:
    """One transfer task: object image, material exemplar, region, prompts."""

    init_image: ImageRGB
    material_image: ImageRGB
    mask: BinaryMask
    prompts: PromptSet
    config: TransferConfig

    def __post_init__(self):
        if self.mask.space != "pixel":
            raise ValidationError("mask", f"expected a pixel-space mask, got space {self.mask.space!r}")
        if (self.mask.height, self.mask.width) != (self.init_image.height, self.init_image.width):
            raise ValidationError(
                "mask",
                f"size {self.mask.height}x{self.mask.width} does not match image "
                f"{self.init_image.height}x{self.init_image.width}",
            )


@dataclass(frozen=True)
class StepLog:
    """What one sampling step did, for inspection and accounting."""

    slot: int
    step_index: int
    guided: bool
    blended: bool
    backend_passes: int
    gamma: float | None = None
    r_cur: float | None = None
    energy_self: float | None = None
    energy_feat: float | None = None

    def to_dict(self) -> dict:
        return {
            "slot": self.slot,
            "step_index": self.step_index,
            "guided": self.guided,
            "blended": self.blended,
            "backend_passes": self.backend_passes,
            "gamma": self.gamma,
            "r_cur": self.r_cur,
            "energy_self": self.energy_self,
            "energy_feat": self.energy_feat,
        }


@dataclass(frozen=True)
class TransferResult:
    image: ImageRGB
    latent: LatentState
    trajectory: InversionTrajectory
    config: TransferConfig
    steps: tuple[StepLog, ...]
    total_backend_passes: int


def blend_background(z: LatentState, z_star: LatentState, latent_mask: BinaryMask) -> LatentState:
    """Keep sampled cells where the mask is 1, take the reference elsewhere.

    Pure selection: background cells hold the reference values bit for bit.
    """
    if z.t != z_star.t:
        raise ValidationError("z_star", f"reference slot {z_star.t} does not match latent slot {z.t}")
    if (latent_mask.height, latent_mask.width) != tuple(z.data.shape[1:]):
        raise ValidationError(
            "latent_mask",
            f"mask {latent_mask.height}x{latent_mask.width} does not match latent grid "
            f"{z.data.shape[1]}x{z.data.shape[2]}",
        )
    gate = torch.from_numpy(latent_mask.values.copy()).to(torch.bool).unsqueeze(0)
    return z.with_data(torch.where(gate, z.data, z_star.data))


def _mask_pyramid_for(backend: DenoiserBackend, mask: BinaryMask) -> tuple[BinaryMask, ...]:
    levels = []
    for mh, mw in backend.metadata.mask_levels:
        levels.append(downsample_mask(mask, (mh, mw), space=f"attention-{mh}x{mw}"))
    return tuple(levels)


def material_transfer(
    backend: DenoiserBackend,
    request: TransferRequest,
    inversion: InversionResult | None = None,
    log_energies: bool = False,
    on_step=None,
    should_cancel=None,
) -> TransferResult:
    """Run one full transfer and return the decoded result with step logs.

    inversion may carry a previously computed trajectory for this image and
    source prompt; otherwise inversion runs here. on_step(step_index, total,
    z) fires after each sampling step; should_cancel() is polled at step
    boundaries and aborts with CancelledRun.

    Each guided step costs exactly four backend passes: target-conditioned,
    unconditioned, the reference pass on the inversion latent, and the
    recording pass the gradient flows through. Unguided steps cost two, plus
    one recording pass when log_energies asks for energies there too.
    """
    cfg = request.config
    schedule = NoiseSchedule.scaled_linear(T=cfg.T, native_steps=backend.metadata.native_steps)

    if inversion is None:
        inversion = ddim_invert(
            backend, request.init_image, request.prompts.y_src, schedule, record_internals=log_energies
        )
    trajectory = inversion.trajectory
    if trajectory.T != cfg.T:
        raise ValidationError("inversion", f"trajectory has {trajectory.T} steps, config wants {cfg.T}")
    if trajectory.y_src != request.prompts.y_src:
        raise ValidationError("inversion", "trajectory was inverted under a different source prompt")
    if log_energies and inversion.star_internals is None:
        raise ValidationError("log_energies", "needs an inversion recorded with internals")

    latent_hw = backend.metadata.latent_shape[1:]
    latent_mask = downsample_mask(request.mask, latent_hw, space="latent")
    pyramid = _mask_pyramid_for(backend, request.mask)
    material = backend.embed_material(request.material_image)
    guidance_on = cfg.v_self > 0 or cfg.v_feat > 0

    z = trajectory[cfg.T]
    logs: list[StepLog] = []
    for t in range(cfg.T, 0, -1):
        step_index = cfg.T - t
        if should_cancel is not None and should_cancel():
            raise CancelledRun(step_index)
        passes_before = backend.forward_calls
        tau = schedule.native_timestep(t)
        lam_t = lambda_schedule(cfg.lam, step_index)
        cond_trg = Conditioning.text_image(request.prompts.y_trg, material, lam_t, pyramid)

        eps_cond, _ = backend.predict_noise(z, cond_trg, timestep=tau)
        eps_uncond, _ = backend.predict_noise(z, Conditioning.null(), timestep=tau)
        eps_cfg = cfg_combine(eps_uncond, eps_cond, cfg.w)

        guided = guidance_on and guidance_active(t, cfg.T, cfg.tau_g)
        gamma = r_cur = e_self = e_feat = None
        if guided:
            with torch.no_grad():
                _, star = backend.predict_noise(
                    trajectory[t], Conditioning.from_text(request.prompts.y_src),
                    record_internals=True, timestep=tau,
                )
            terms = guidance_gradient(
                backend, z, request.prompts.y_src, star, cfg.v_self, cfg.v_feat, timestep=tau
            )
            gamma, r_cur = rescale_factor(eps_cfg - eps_uncond, terms.gradient, cfg.r_lower, cfg.r_upper)
            eps_final = combine_noise(eps_cfg, terms.gradient, gamma)
            e_self, e_feat = terms.energy_self, terms.energy_feat
        else:
            eps_final = eps_cfg
            if log_energies:
                with torch.no_grad():
                    _, cur = backend.predict_noise(
                        z, Conditioning.from_text(request.prompts.y_src),
                        record_internals=True, timestep=tau,
                    )
                star = inversion.star_internals[t]
                e_self = float(self_attention_energy(star, cur))
                e_feat = float(feature_energy(star, cur))

        if not torch.isfinite(eps_final).all():
            raise NonFiniteLatentError(f"non-finite noise prediction at slot {t}")
        try:
            z = ddim_step(z, eps_final.detach(), schedule)
        except ValidationError as exc:
            raise NonFiniteLatentError(f"non-finite latent at slot {t - 1}: {exc}") from exc

        blended = blending_active(t, cfg.T, cfg.tau_m)
        if blended:
            z = blend_background(z, trajectory[t - 1], latent_mask)

        logs.append(
            StepLog(
                slot=t,
                step_index=step_index,
                guided=guided,
                blended=blended,
                backend_passes=backend.forward_calls - passes_before,
                gamma=gamma,
                r_cur=r_cur,
                energy_self=e_self,
                energy_feat=e_feat,
            )
        )
        if on_step is not None:
            on_step(step_index, cfg.T, z)

    return TransferResult(
        image=backend.decode(z),
        latent=z,
        trajectory=trajectory,
        config=cfg,
        steps=tuple(logs),
        total_backend_passes=sum(log.backend_passes for log in logs),
    )


def lambda_sweep(
    backend: DenoiserBackend,
    request: TransferRequest,
    lam_values: tuple[float, ...] = (0.5, 0.8, 1.1, 1.5),
    log_energies: bool = False,
    should_cancel=None,
) -> list[tuple[float, TransferResult]]:
    """Run the same transfer at several transfer forces, inverting once.

    The inversion depends only on the object image and source prompt, so all
    runs share it. Results come back in the order of lam_values.
    """
    if not lam_values:
        raise ValidationError("lam_values", "need at least one value")
    schedule = NoiseSchedule.scaled_linear(
        T=request.config.T, native_steps=backend.metadata.native_steps
    )
    inversion = ddim_invert(
        backend, request.init_image, request.prompts.y_src, schedule, record_internals=log_energies
    )
    results = []
    for lam in lam_values:
        swept = replace(request, config=request.config.replace(lam=lam))
        results.append(
            (
                lam,
                material_transfer(
                    backend,
                    swept,
                    inversion=inversion,
                    log_energies=log_energies,
                    should_cancel=should_cancel,
                ),
            )
        )
    return results


def write_run_dir(result: TransferResult, out_dir: str, force: bool = False) -> None:
    """Persist one run: result.png, config.json, steps.jsonl, run.json.

    Refuses to clobber an existing non-empty directory unless forced.
    """
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"output directory {out_dir} is not empty (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)
    result.image.save(os.path.join(out_dir, "result.png"))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(result.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "steps.jsonl"), "w") as fh:
        for log in result.steps:
            fh.write(json.dumps(log.to_dict()) + "\n")
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(
            {
                "steps": len(result.steps),
                "total_backend_passes": result.total_backend_passes,
                "guided_steps": sum(1 for s in result.steps if s.guided),
                "blended_steps": sum(1 for s in result.steps if s.blended),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
