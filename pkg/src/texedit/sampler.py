"""Deterministic DDIM sampling and inversion with classifier-free guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import OrderingError, RangeError, ShapeError

CLEAN = -1  # pseudo-timestep of the clean latent at the end of denoising


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients plus the DDIM sampling sub-sequence.

    ``alphas_cumprod[t]`` is the running product of ``alphas[0..t]``. The clean
    end of the chain is the pseudo-timestep ``CLEAN`` whose cumulative alpha is
    ``final_alpha_cumprod`` (1.0 by default, so the clean latent carries no noise).
    """

    betas: torch.Tensor
    timesteps: tuple[int, ...]
    final_alpha_cumprod: float = 1.0
    alphas: torch.Tensor = field(init=False)
    alphas_cumprod: torch.Tensor = field(init=False)
    sigmas: torch.Tensor = field(init=False)

    def __post_init__(self):
        betas = self.betas.to(torch.float64)
        if betas.ndim != 1 or not bool(((betas > 0) & (betas < 1)).all()):
            raise RangeError("betas must be a 1-D sequence in (0, 1)")
        ts = tuple(int(t) for t in self.timesteps)
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
            raise OrderingError("DDIM timesteps must be strictly increasing")
        if ts[0] < 0 or ts[-1] >= len(betas):
            raise RangeError(f"DDIM timesteps must lie in [0, {len(betas)})")
        alphas = 1.0 - betas
        alphas_cumprod = torch.cumprod(alphas, dim=0)
        prev = torch.cat([torch.ones(1, dtype=torch.float64), alphas_cumprod[:-1]])
        # posterior variance of the ancestral (DDPM) sampler; kept for reference, DDIM runs with eta = 0
        sigmas = (1.0 - prev) / (1.0 - alphas_cumprod) * betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alphas_cumprod", alphas_cumprod)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def from_betas(cls, betas, num_steps: int, steps_offset: int = 1, final_alpha_cumprod: float = 1.0):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        T = len(betas)
        stride = T // num_steps
        if num_steps < 1 or stride < 1:
            raise RangeError(f"cannot take {num_steps} DDIM steps over {T} timesteps")
        timesteps = tuple(i * stride + steps_offset for i in range(num_steps))
        if timesteps[-1] >= T:
            timesteps = tuple(i * stride for i in range(num_steps))
        return cls(betas=betas, timesteps=timesteps, final_alpha_cumprod=final_alpha_cumprod)

    @classmethod
    def scaled_linear(cls, num_steps: int = 50, num_train_timesteps: int = 1000, beta_start: float = 0.00085,
                      beta_end: float = 0.012, steps_offset: int = 1, final_alpha_cumprod: float = 1.0):
        """Stable Diffusion v1 training schedule (betas linear in sqrt space)."""
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps, dtype=torch.float64) ** 2
        return cls.from_betas(betas, num_steps, steps_offset, final_alpha_cumprod)

    @property
    def num_train_timesteps(self) -> int:
        return len(self.betas)

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    def alpha_bar(self, t: int) -> float:
        if t == CLEAN:
            return float(self.final_alpha_cumprod)
        if not 0 <= t < self.num_train_timesteps:
            raise RangeError(f"timestep {t} outside [0, {self.num_train_timesteps})")
        return float(self.alphas_cumprod[t])

    def denoising_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) for each denoising step, high noise first; the last t_prev is CLEAN."""
        desc = list(reversed(self.timesteps))
        return list(zip(desc, desc[1:] + [CLEAN]))

    def inversion_pairs(self) -> list[tuple[int, int]]:
        """(t_cur, t_next) for each inversion step, starting from the clean latent."""
        asc = list(self.timesteps)
        return list(zip([CLEAN] + asc[:-1], asc))


def add_noise(x0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0) with the given noise: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(x0.shape)}")
    if not 0 <= t < schedule.num_train_timesteps:
        raise RangeError(f"timestep {t} outside [0, {schedule.num_train_timesteps})")
    a = schedule.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * noise


def _transfer(z: torch.Tensor, eps: torch.Tensor, a_from: float, a_to: float) -> torch.Tensor:
    x0_hat = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * x0_hat + math.sqrt(1.0 - a_to) * eps


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM denoising step from ``t`` down to ``t_prev``."""
    if t_prev >= t:
        raise OrderingError(f"denoising requires t_prev < t, got t={t}, t_prev={t_prev}")
    if eps.shape != z_t.shape:
        raise ShapeError(f"noise estimate shape {tuple(eps.shape)} != latent shape {tuple(z_t.shape)}")
    return _transfer(z_t, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))


def invert_step(z: torch.Tensor, eps: torch.Tensor, t_cur: int, t_next: int, schedule: NoiseSchedule) -> torch.Tensor:
    """The DDIM recurrence run upwards in noise, from ``t_cur`` to ``t_next``."""
    if t_next <= t_cur:
        raise OrderingError(f"inversion requires t_next > t_cur, got t_cur={t_cur}, t_next={t_next}")
    if eps.shape != z.shape:
        raise ShapeError(f"noise estimate shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    return _transfer(z, eps, schedule.alpha_bar(t_cur), schedule.alpha_bar(t_next))


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"guidance operands differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class LatentTrajectory:
    """Latents in the order they were produced, aligned with ``timesteps``.

    Inversion runs CLEAN -> t_S, denoising runs t_S -> CLEAN; either way there
    are S + 1 latents. ``taps`` maps step index to the features recorded there.
    """

    latents: list[torch.Tensor]
    timesteps: list[int]
    branch: str
    schedule: NoiseSchedule
    taps: dict[int, list] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def final(self) -> torch.Tensor:
        return self.latents[-1]

    def at(self, t: int) -> torch.Tensor:
        return self.latents[self.timesteps.index(t)]


@dataclass
class StepDirective:
    """What a step callback asks of the next noise prediction."""

    latent: torch.Tensor | None = None
    taps_in: Sequence = ()
    taps_out: Sequence = ()
    attention_edits: dict | None = None


StepCallback = Callable[[int, int, torch.Tensor], "StepDirective | None"]
LatentCallback = Callable[[int, int, torch.Tensor], torch.Tensor]


def guided_noise(handle, latent, t, cond, uncond=None, guidance_scale: float = 1.0, *, taps_in=(), taps_out=(),
                 attention_edits=None, step=None):
    """Noise estimate under classifier-free guidance.

    At unit scale only the conditional pass runs, so the result is bit-identical
    to an unguided call. Otherwise the unconditional and conditional passes share
    one batch and receive the same injections and attention edits.
    """
    if guidance_scale == 1.0:
        return handle.predict_noise(latent, t, cond, taps_in=taps_in, taps_out=taps_out,
                                    attention_edits=attention_edits, step=step)
    if uncond is None:
        raise ShapeError("classifier-free guidance needs an unconditional embedding")
    emb = torch.cat([uncond, cond])
    eps, taps = handle.predict_noise(latent, t, emb, taps_in=taps_in, taps_out=taps_out,
                                     attention_edits=attention_edits, step=step)
    eps_u, eps_c = eps.chunk(2)
    return cfg_combine(eps_u, eps_c, guidance_scale), taps


def ddim_invert(x0_latent, prompt_embedding, handle, schedule: NoiseSchedule, guidance_scale: float = 1.0,
                uncond_embedding=None) -> LatentTrajectory:
    """Map a clean latent to its DDIM starting noise Z*_T."""
    z = x0_latent
    latents, timesteps = [z], [CLEAN]
    for step, (t_cur, t_next) in enumerate(schedule.inversion_pairs()):
        eps, _ = guided_noise(handle, z, t_next, prompt_embedding, uncond_embedding, guidance_scale, step=step)
        z = invert_step(z, eps, t_cur, t_next, schedule)
        latents.append(z)
        timesteps.append(t_next)
    return LatentTrajectory(latents, timesteps, branch="source", schedule=schedule)


def denoise_step(handle, z, t, t_prev, schedule, cond, uncond=None, guidance_scale=1.0, directive=None, step=None):
    """Predict noise at ``t`` and take one DDIM step; returns (z_prev, taps)."""
    directive = directive or StepDirective()
    eps, taps = guided_noise(handle, z, t, cond, uncond, guidance_scale, taps_in=directive.taps_in,
                             taps_out=directive.taps_out, attention_edits=directive.attention_edits, step=step)
    return ddim_step(z, eps, t, t_prev, schedule), taps


def ddim_denoise(z_T, prompt_embedding, handle, schedule: NoiseSchedule, guidance_scale: float = 1.0,
                 step_callback: StepCallback | None = None, uncond_embedding=None,
                 latent_callback: LatentCallback | None = None, branch: str = "target") -> LatentTrajectory:
    """Run the S DDIM steps from ``z_T``.

    ``step_callback(step, t, z)`` runs before each noise prediction and may
    return a :class:`StepDirective` replacing the latent or supplying taps and
    attention edits. ``latent_callback(step, t_prev, z)`` may rewrite the latent
    after each DDIM step.
    """
    z = z_T
    latents, timesteps, taps = [z], [schedule.timesteps[-1]], {}
    for step, (t, t_prev) in enumerate(schedule.denoising_pairs()):
        directive = step_callback(step, t, z) if step_callback else None
        if directive is not None and directive.latent is not None:
            z = directive.latent
            latents[-1] = z
        z, recorded = denoise_step(handle, z, t, t_prev, schedule, prompt_embedding, uncond_embedding,
                                   guidance_scale, directive, step)
        if latent_callback is not None:
            z = latent_callback(step, t_prev, z)
        if recorded:
            taps[step] = recorded
        latents.append(z)
        timesteps.append(t_prev)
    return LatentTrajectory(latents, timesteps, branch=branch, schedule=schedule, taps=taps)
