"""Noise schedules, forward noising, and the ancestral sampling loop.

The denoiser predicts the clean condition directly, so a reverse step is
"re-noise the prediction down to the target timestep": c_{t-1} =
sqrt(abar_{t-1}) c0 + sqrt(1 - abar_{t-1}) z. A literal mode using the
per-step alpha_t instead of the cumulative abar_{t-1} is kept for
comparison; it does not converge to c0 at t=1 and is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

__all__ = [
    "NoiseSchedule",
    "SamplerConfig",
    "make_schedule",
    "forward_noise",
    "reverse_step",
    "timestep_subsequence",
    "sample_noise_pack",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha_t (length T) and cumulative abar_t (length T+1, abar_0 = 1)."""

    kind: str
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int | None = None          # None = full T
    noise_seed: int = 0
    deterministic_final_step: bool = True
    literal_alpha: bool = False


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a schedule; abar is always the exact cumulative product of alpha."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, T)
        alpha = 1.0 - beta
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64)
        f = np.cos((ts / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        profile = f / f[0]
        alpha = profile[1:] / profile[:-1]
        alpha = np.clip(alpha, 0.001, 1.0 - 1e-6)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    alpha.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(kind=kind, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, low: int, high: int) -> np.ndarray:
    arr = np.asarray(t)
    if np.any(arr < low) or np.any(arr > high):
        raise ValueError(f"timestep out of range [{low}, {high}]: {arr}")
    return arr


def forward_noise(c0: np.ndarray, t, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """q-sample: c_t = sqrt(abar_t) c0 + sqrt(1 - abar_t) z. t may be batched."""
    t = _check_t(t, 0, sched.T)
    ab = sched.alpha_bar[t]
    if np.ndim(ab) > 0:
        ab = ab[..., None]
    dtype = np.asarray(c0).dtype
    return (np.sqrt(ab) * c0 + np.sqrt(1.0 - ab) * z).astype(dtype, copy=False)


def reverse_step(c0_pred: np.ndarray, t, z: np.ndarray, sched: NoiseSchedule,
                 literal_alpha: bool = False) -> np.ndarray:
    """Re-noise the clean prediction to timestep t-1 (given we are at t)."""
    t = _check_t(t, 1, sched.T)
    coef = sched.alpha[t - 1] if literal_alpha else sched.alpha_bar[t - 1]
    if np.ndim(coef) > 0:
        coef = coef[..., None]
    dtype = np.asarray(c0_pred).dtype
    return (np.sqrt(coef) * c0_pred + np.sqrt(1.0 - coef) * z).astype(dtype, copy=False)


def timestep_subsequence(T: int, steps: int | None) -> np.ndarray:
    """Descending timesteps to visit; full range when steps is None or >= T."""
    if steps is None or steps >= T:
        return np.arange(T, 0, -1)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    seq = np.unique(np.round(np.linspace(T, 1, steps)).astype(np.int64))[::-1]
    return seq


def sample_noise_pack(seed: int, n_steps: int, latent_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded noise for one sampling run: initial c_T and one z per step.

    Single canonical draw order (initial noise first, then the per-step
    block) so batched and per-sample invocations can share streams.
    """
    rng = np.random.default_rng(seed)
    c_init = rng.standard_normal(latent_dim)
    zs = rng.standard_normal((n_steps, latent_dim))
    return c_init, zs


def sample(denoiser, sched: NoiseSchedule, cfg: SamplerConfig, latent_dim: int,
           batch: int = 1, noise: tuple[np.ndarray, np.ndarray] | None = None,
           dtype=np.float32) -> np.ndarray:
    """Ancestral sampling loop. Returns the final clean prediction, (batch, D).

    ``denoiser(c_t, t)`` maps a (batch, D) noisy condition and (batch,)
    integer timesteps to the predicted clean condition. When ``noise`` is
    given it must be (c_init (batch, D), zs (n_steps, batch, D)); otherwise
    both are drawn from cfg.noise_seed via :func:`sample_noise_pack` draw
    order, stacked per sample.
    """
    t_seq = timestep_subsequence(sched.T, cfg.steps)
    n_steps = len(t_seq)
    if noise is None:
        packs = [sample_noise_pack(cfg.noise_seed + i, n_steps, latent_dim) for i in range(batch)]
        c = np.stack([p[0] for p in packs]).astype(dtype)
        zs = np.stack([p[1] for p in packs], axis=1).astype(dtype)
    else:
        c_init, zs = noise
        c = np.asarray(c_init, dtype=dtype).reshape(batch, latent_dim).copy()
        zs = np.asarray(zs, dtype=dtype).reshape(n_steps, batch, latent_dim)

    c0 = c
    for i, t in enumerate(t_seq):
        t_batch = np.full(batch, int(t), dtype=np.int64)
        c0 = np.asarray(denoiser(c, t_batch))
        if not np.all(np.isfinite(c0)):
            raise NumericError(f"denoiser produced non-finite output at timestep {int(t)}")
        last = i == n_steps - 1
        target = 0 if last else int(t_seq[i + 1])
        if cfg.literal_alpha:
            if last and cfg.deterministic_final_step:
                c = c0
            else:
                c = reverse_step(c0, int(t), zs[i], sched, literal_alpha=True)
        else:
            z = np.zeros_like(c0) if (last and cfg.deterministic_final_step) else zs[i]
            ab = sched.alpha_bar[target]
            c = (np.sqrt(ab) * c0 + np.sqrt(1.0 - ab) * z).astype(dtype, copy=False)
    return c
