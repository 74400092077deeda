"""Noise schedule, training loss and samplers for the latent video model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .action_tree import decompose_primitives
from .core import functional as F
from .core.tensor import Tensor, no_grad
from .guidance import stack_conditions
from .modalities import SceneObservation


class TrainingError(FloatingPointError):
    pass


class NoiseSchedule:
    """Linear betas; ``rescale`` stretches them so ``steps`` ends near pure noise.

    With ``rescale`` the endpoints are multiplied by ``1000 / steps``, which
    keeps the total injected variance of the classic 1000-step schedule
    when fewer steps are used.
    """

    def __init__(self, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
                 rescale: bool = True):
        if steps < 1:
            raise ValueError("schedule needs at least one step")
        k = 1000.0 / steps if rescale else 1.0
        self.steps = steps
        self.betas = np.linspace(beta_start * k, beta_end * k, steps, dtype=np.float64)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def abar(self, t) -> np.ndarray:
        """Cumulative alpha at 1-based ``t``; ``t = 0`` is the clean signal."""
        t = np.asarray(t)
        if (t < 0).any() or (t > self.steps).any():
            raise ValueError(f"timestep out of range [0, {self.steps}]: {t}")
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def respaced(self, n: int) -> list[int]:
        """Descending timesteps for an ``n``-step sampler, ending at 1."""
        n = min(n, self.steps)
        ts = np.unique(np.round(np.linspace(1, self.steps, n)).astype(int))
        return [int(v) for v in ts[::-1]]


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if (t < 1).any() or (t > schedule.steps).any():
        raise ValueError(f"t must lie in [1, {schedule.steps}], got {t}")
    ab = schedule.abar(t).reshape(np.shape(t) + (1,) * (np.ndim(z0) - np.ndim(t)))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise).astype(np.result_type(z0, np.float32))


# -- latent space -----------------------------------------------------------

def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """``[..., 3, H, W]`` in [0,1] -> ``[..., 3p^2, H/p, W/p]`` in [-1,1]."""
    *lead, c, h, w = frames.shape
    x = 2.0 * frames - 1.0
    x = x.reshape(*lead, c, h // p, p, w // p, p)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return np.ascontiguousarray(x.reshape(*lead, c * p * p, h // p, w // p))


def unpatchify(z: np.ndarray, p: int) -> np.ndarray:
    *lead, cz, hh, ww = z.shape
    c = cz // (p * p)
    nl = len(lead)
    x = z.reshape(*lead, c, p, p, hh, ww)
    x = x.transpose(*range(nl), nl, nl + 3, nl + 1, nl + 4, nl + 2)
    x = x.reshape(*lead, c, hh * p, ww * p)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


# -- conditioning -------------------------------------------------------------

@dataclass
class Conditioning:
    first: Tensor  # [B, Cz, h, w]
    context: Tensor  # [B, L, d]
    guidance: dict | None  # injected layer -> [B*T, C, h, w]

    @property
    def batch(self) -> int:
        return self.first.dims[0]


def make_conditioning(model, observations: Sequence[SceneObservation], instructions: Sequence[str],
                      use_tree: bool | None = None, context: Tensor | None = None) -> Conditioning:
    cfg = model.cfg
    first = np.stack([patchify(np.asarray(o.rgb), cfg.patch) for o in observations]).astype(model.dtype)
    ctx = context if context is not None else model.encode_text(instructions, use_tree)
    guid = None
    if model.guidance is not None:
        guid = model.encode_guidance(stack_conditions(observations, model.guidance.modalities, model.dtype))
    return Conditioning(Tensor(first), ctx, guid)


def episode_latents(episodes, patch: int, residual: bool = False, dtype=np.float32) -> np.ndarray:
    """Target latents ``[B, F, Cz, h, w]`` for frames 1..F.

    With ``residual`` each frame's latent has the frame-0 latent removed, so
    a still scene is the all-zero target.
    """
    out = []
    for ep in episodes:
        z = patchify(np.asarray(ep.frames, np.float64), patch)
        out.append(z[1:] - z[:1] if residual else z[1:])
    return np.stack(out).astype(dtype)


def latent_clip(cfg) -> float:
    """Bound on clean latents: [-1, 1] for frames, [-2, 2] for changes."""
    return 2.0 if cfg.residual else 1.0


def decode(model, z: np.ndarray, cond: Conditioning) -> np.ndarray:
    """Latents from the sampler -> frames ``[B, F, 3, H, W]`` in [0, 1]."""
    if model.cfg.residual:
        z = z + cond.first.data[:, None]
    return unpatchify(z, model.cfg.patch)


def training_loss(model, schedule: NoiseSchedule, z0: np.ndarray, cond: Conditioning,
                  rng: np.random.Generator, t: np.ndarray | None = None, step: int | None = None):
    """Mean squared error between sampled noise and the model's prediction."""
    b = z0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.integers(1, schedule.steps + 1, size=b)
    noise = rng.standard_normal(z0.shape).astype(z0.dtype)
    zt = q_sample(schedule, z0, t, noise)
    pred = model(Tensor(zt), t, cond.first, cond.context, cond.guidance)
    loss = F.mse(pred, noise)
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite loss at step {step} (t={t.tolist()}, "
                            f"|pred|max={np.abs(pred.data).max():.3g})")
    return loss


# -- sampling -------------------------------------------------------------------

def denoise_step(schedule: NoiseSchedule, z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
                 eta: float = 1.0, rng: np.random.Generator | None = None,
                 clip: float | None = 1.0) -> np.ndarray:
    """One step from ``t`` to ``t_prev`` given predicted noise.

    ``eta = 1`` is the ancestral (stochastic) sampler, ``eta = 0`` the
    deterministic one; ``t_prev = 0`` returns the clean estimate.
    """
    if t < 1:
        raise ValueError("denoise_step needs t >= 1")
    ab_t = float(schedule.abar(t))
    ab_p = float(schedule.abar(t_prev))
    z0 = (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if clip is not None:
        z0 = np.clip(z0, -clip, clip)
    if t_prev == 0:
        return z0.astype(z_t.dtype)
    sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p))
    eps_dir = (z_t - np.sqrt(ab_t) * z0) / np.sqrt(1.0 - ab_t)
    out = np.sqrt(ab_p) * z0 + np.sqrt(max(1.0 - ab_p - sigma ** 2, 0.0)) * eps_dir
    if sigma > 0:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        out = out + sigma * rng.standard_normal(z_t.shape)
    return out.astype(z_t.dtype)


def _initial_noise(model, batch: int, rng: np.random.Generator) -> np.ndarray:
    cfg = model.cfg
    shape = (batch, cfg.frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    return rng.standard_normal(shape).astype(model.dtype)


def _timesteps(schedule: NoiseSchedule, sample_steps: int) -> list[tuple[int, int]]:
    ts = schedule.respaced(sample_steps)
    return list(zip(ts, ts[1:] + [0]))


def sample_latents(model, schedule: NoiseSchedule, cond: Conditioning, seed: int,
                   sample_steps: int = 50, eta: float = 1.0, clip: float | None = None) -> np.ndarray:
    clip = latent_clip(model.cfg) if clip is None else clip
    rng = np.random.default_rng(seed)
    z = _initial_noise(model, cond.batch, rng)
    with no_grad():
        for t, t_prev in _timesteps(schedule, sample_steps):
            eps = model(Tensor(z), t, cond.first, cond.context, cond.guidance).data
            z = denoise_step(schedule, z, eps, t, t_prev, eta, rng, clip)
    return z


def sample_video(model, schedule: NoiseSchedule, observations: Sequence[SceneObservation],
                 instructions: Sequence[str], seed: int = 0, sample_steps: int = 50, eta: float = 1.0,
                 use_tree: bool | None = None) -> np.ndarray:
    """Generated frames 1..F, ``[B, F, 3, H, W]`` in [0,1]."""
    with no_grad():
        cond = make_conditioning(model, observations, instructions, use_tree)
    z = sample_latents(model, schedule, cond, seed, sample_steps, eta)
    return decode(model, z, cond)


def _take_batch(x: Tensor, index: np.ndarray) -> Tensor:
    return Tensor(x.data[index])


def sample_decomposed(model, schedule: NoiseSchedule, observations: Sequence[SceneObservation],
                      instructions: Sequence[str], seed: int = 0, sample_steps: int = 50,
                      eta: float = 1.0, primitives: Sequence[Sequence[str]] | None = None) -> np.ndarray:
    """Average the noise predicted for each primitive clause at every step.

    All primitives of all samples run in one batched call per step, so the
    per-sample forward count is ``n`` times that of :func:`sample_video`.
    """
    lexicon = model.text.lexicon
    if primitives is None:
        primitives = [decompose_primitives(s, lexicon) for s in instructions]
    owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(primitives)])
    flat = [c for p in primitives for c in p]
    counts = np.array([len(p) for p in primitives], dtype=np.float64)
    with no_grad():
        base = make_conditioning(model, observations, instructions, use_tree=False,
                                 context=model.encode_text(flat, use_tree=False))
        frames = model.cfg.frames
        first = _take_batch(base.first, owner)
        guid = None
        if base.guidance is not None:
            idx = (owner[:, None] * frames + np.arange(frames)[None]).reshape(-1)
            guid = {k: _take_batch(v, idx) for k, v in base.guidance.items()}
        rng = np.random.default_rng(seed)
        z = _initial_noise(model, len(primitives), rng)
        for t, t_prev in _timesteps(schedule, sample_steps):
            eps_all = model(Tensor(z[owner]), t, first, base.context, guid).data
            eps = np.zeros_like(z)
            np.add.at(eps, owner, eps_all)
            eps /= counts.reshape(-1, 1, 1, 1, 1)
            z = denoise_step(schedule, z, eps.astype(z.dtype), t, t_prev, eta, rng, latent_clip(model.cfg))
    return decode(model, z, base)
