"""Deterministic DDIM sampling and inversion over a slot-indexed schedule.

Slots run 0..T where slot 0 is the clean latent (alpha_bar exactly 1) and
slot T is the noisiest. Each transition between slots t-1 and t uses one
native model timestep, the same one in both directions, so inversion followed
by sampling retraces the trajectory up to the latent-dependence of the noise
prediction. Sampling is the eta=0 update: no noise is ever drawn, identical
inputs give identical trajectories.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch

from .core import ImageRGB, InversionTrajectory, LatentState, ValidationError
from .denoiser import Conditioning, DenoiserBackend, DenoiserInternals


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar per slot plus the native timestep behind each transition.

    slot_alphas has T+1 entries, strictly decreasing from exactly 1.0 at slot
    0; native_timesteps[t] is the model timestep used for the transition
    between slots t-1 and t (entry 0 is unused).
    """

    slot_alphas: np.ndarray
    native_timesteps: np.ndarray
    native_steps: int

    def __post_init__(self):
        if self.slot_alphas[0] != 1.0:
            raise ValidationError("slot_alphas", "slot 0 must have alpha_bar exactly 1.0")
        if np.any(np.diff(self.slot_alphas) >= 0):
            raise ValidationError("slot_alphas", "alpha_bar must strictly decrease with slot")
        if np.any(self.slot_alphas <= 0) or np.any(self.slot_alphas > 1):
            raise ValidationError("slot_alphas", "alpha_bar values must lie in (0, 1]")

    @property
    def T(self) -> int:
        return len(self.slot_alphas) - 1

    @classmethod
    def scaled_linear(
        cls,
        T: int,
        native_steps: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
    ) -> "NoiseSchedule":
        """Square-root-spaced betas, the schedule the full model was trained on."""
        if T < 1:
            raise ValidationError("T", f"must be >= 1, got {T}")
        if T > native_steps:
            raise ValidationError("T", f"cannot exceed native_steps {native_steps}, got {T}")
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), native_steps, dtype=np.float64) ** 2
        alphas_cumprod = np.cumprod(1.0 - betas)
        taus = np.rint(np.arange(T + 1) * (native_steps - 1) / T).astype(np.int64)
        slot_alphas = np.empty(T + 1, dtype=np.float64)
        slot_alphas[0] = 1.0
        slot_alphas[1:] = alphas_cumprod[taus[1:]]
        return cls(
            slot_alphas=_readonly(slot_alphas),
            native_timesteps=_readonly(taus),
            native_steps=native_steps,
        )

    def alpha_bar(self, slot: int) -> float:
        if not 0 <= slot <= self.T:
            raise ValidationError("slot", f"must be in [0, {self.T}], got {slot}")
        return float(self.slot_alphas[slot])

    def native_timestep(self, slot: int) -> int:
        """Model timestep for the transition between slots slot-1 and slot."""
        if not 1 <= slot <= self.T:
            raise ValidationError("slot", f"must be in [1, {self.T}], got {slot}")
        return int(self.native_timesteps[slot])


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _predicted_clean(z: torch.Tensor, eps: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    return (z - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar)


def ddim_step(z: LatentState, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentState:
    """One denoising update from slot t to slot t-1 with eta = 0."""
    t = z.t
    if not 1 <= t <= schedule.T:
        raise ValidationError("z", f"slot must be in [1, {schedule.T}] to step down, got {t}")
    a_t, a_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    clean = _predicted_clean(z.data, eps, a_t)
    data = np.sqrt(a_prev) * clean + np.sqrt(1.0 - a_prev) * eps
    return LatentState(data=data, t=t - 1)


def ddim_invert_step(z: LatentState, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentState:
    """One noising update from slot t-1 to slot t; exact inverse of ddim_step
    under the same eps."""
    t = z.t + 1
    if t > schedule.T:
        raise ValidationError("z", f"slot {z.t} is already the top of a {schedule.T}-step schedule")
    a_prev, a_t = schedule.alpha_bar(t - 1), schedule.alpha_bar(t)
    clean = _predicted_clean(z.data, eps, a_prev)
    data = np.sqrt(a_t) * clean + np.sqrt(1.0 - a_t) * eps
    return LatentState(data=data, t=t)


@dataclass(frozen=True)
class InversionResult:
    """Trajectory plus, when requested, the internals of each inversion pass
    keyed by target slot.

    The pass behind transition t evaluates the model at the slot t-1 latent,
    so the recorded internals stand in for slot t's reference internals when
    a later sampling step only wants to log energies without paying an extra
    model pass.
    """

    trajectory: InversionTrajectory
    star_internals: dict[int, DenoiserInternals] | None = None


def ddim_invert(
    backend: DenoiserBackend,
    start: ImageRGB | LatentState,
    y_src: str,
    schedule: NoiseSchedule,
    record_internals: bool = False,
) -> InversionResult:
    """Invert a clean image (or slot-0 latent) up the full schedule.

    Every prediction conditions on the source prompt alone; inversion never
    applies guidance. The returned trajectory has T+1 states, slot 0 being
    the encoded input.
    """
    if isinstance(start, ImageRGB):
        z = backend.encode(start)
    else:
        if start.t != 0:
            raise ValidationError("start", f"inversion starts from slot 0, got slot {start.t}")
        z = start
    cond = Conditioning.from_text(y_src)
    latents = [z]
    internals: dict[int, DenoiserInternals] = {}
    for t in range(1, schedule.T + 1):
        eps, recorded = backend.predict_noise(
            z, cond, record_internals=record_internals, timestep=schedule.native_timestep(t)
        )
        if record_internals:
            internals[t] = recorded
        z = ddim_invert_step(z, eps, schedule)
        latents.append(z)
    return InversionResult(
        trajectory=InversionTrajectory(latents=tuple(latents), y_src=y_src),
        star_internals=internals if record_internals else None,
    )


def reconstruct(
    backend: DenoiserBackend, trajectory: InversionTrajectory, schedule: NoiseSchedule
) -> LatentState:
    """Sample back down from the trajectory top with source-prompt
    conditioning only; returns the slot-0 latent."""
    if trajectory.T != schedule.T:
        raise ValidationError("trajectory", f"has {trajectory.T} steps but schedule has {schedule.T}")
    cond = Conditioning.from_text(trajectory.y_src)
    z = trajectory[schedule.T]
    for t in range(schedule.T, 0, -1):
        eps, _ = backend.predict_noise(z, cond, timestep=schedule.native_timestep(t))
        z = ddim_step(z, eps, schedule)
    return z


class TrajectoryCache:
    """Content-addressed inversion reuse, in memory with optional disk spill.

    The key covers everything the trajectory depends on: backend
    fingerprint, input image bytes, source prompt and step count. Useful when
    several transfers (a sweep, repeated service jobs) share one input.
    """

    def __init__(self, cache_dir: str | None = None):
        self._memory: dict[str, InversionTrajectory] = {}
        self.cache_dir = cache_dir
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    @staticmethod
    def key(backend_fingerprint: str, image: ImageRGB, y_src: str, T: int) -> str:
        digest = hashlib.sha256()
        digest.update(backend_fingerprint.encode())
        digest.update(image.pixels.tobytes())
        digest.update(y_src.encode())
        digest.update(str(T).encode())
        return digest.hexdigest()

    def get(self, key: str) -> InversionTrajectory | None:
        if key in self._memory:
            return self._memory[key]
        if self.cache_dir:
            path = os.path.join(self.cache_dir, f"{key}.pt")
            if os.path.isfile(path):
                payload = torch.load(path, weights_only=True)
                latents = tuple(
                    LatentState(data=data, t=t) for t, data in enumerate(payload["latents"])
                )
                trajectory = InversionTrajectory(latents=latents, y_src=payload["y_src"])
                self._memory[key] = trajectory
                return trajectory
        return None

    def put(self, key: str, trajectory: InversionTrajectory) -> None:
        self._memory[key] = trajectory
        if self.cache_dir:
            payload = {
                "latents": [state.data for state in trajectory.latents],
                "y_src": trajectory.y_src,
            }
            path = os.path.join(self.cache_dir, f"{key}.pt")
            tmp = f"{path}.tmp"
            torch.save(payload, tmp)
            os.replace(tmp, path)
