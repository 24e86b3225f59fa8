"""Diffusion-process mathematics: noise schedules, forward corruption, the
noise-ratio -> timestep mapping, and reverse (ancestral and skipped-step)
denoising updates.

Everything here is a pure function over immutable schedules.  Array math runs
in float32 with coefficients precomputed in float64 and cast once, so results
are identical regardless of call order or threading.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, rho_to_step

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_noise",
    "rho_to_step",
    "reverse_step",
    "reverse_hop",
    "make_step_sequence",
    "run_reverse_chain",
]

#: A latent code is a float32 array of shape (C, H', W').
LatentCode = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants of the corruption process.

    Arrays have length T+1 and are indexed directly by timestep t in [0, T];
    index 0 holds the convention values beta=0, alpha=1, alpha_bar=1, sigma=0
    ("no corruption"), which also makes the posterior sigma at t=1 exactly 0.
    """

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_mode: str = "posterior"

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} out of range [1, {self.timesteps}]")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t)])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} out of range [0, {self.timesteps}]")
        return float(self.alpha_bars[int(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check_t(t)])


def build_schedule(
    timesteps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "posterior",
) -> NoiseSchedule:
    """Linear-beta schedule of length `timesteps`.

    sigma_mode "posterior" gives sigma_t = sqrt(((1 - abar_{t-1}) / (1 - abar_t)) * beta_t)
    (with abar_0 = 1, hence sigma_1 = 0); "zero" gives the fully deterministic
    reverse process.
    """
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"beta bounds must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if sigma_mode not in ("posterior", "zero"):
        raise ConfigError(f"sigma_mode must be 'posterior' or 'zero', got {sigma_mode!r}")

    betas = np.zeros(timesteps + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    sigmas = np.zeros(timesteps + 1, dtype=np.float64)
    if sigma_mode == "posterior":
        t = np.arange(1, timesteps + 1)
        sigmas[1:] = np.sqrt((1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t])

    sched = NoiseSchedule(timesteps, betas, alphas, alpha_bars, sigmas, sigma_mode)
    if timesteps > 1 and not np.all(np.diff(alpha_bars[1:]) < 0):
        raise ConfigError("alpha_bar must be strictly decreasing")
    if alpha_bars[timesteps] <= 0.0 or np.any(alpha_bars[1:] > 1.0):
        raise ConfigError("alpha_bar must stay within (0, 1]")
    return sched


def _as_f32(x: float) -> np.float32:
    return np.float32(x)


def _check_latent_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"latent shape mismatch: {a.shape} vs {b.shape}")


def forward_noise(z0: LatentCode, t: int, eps: LatentCode, sched: NoiseSchedule) -> LatentCode:
    """Corrupt a clean latent to step t:
    sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    sched._check_t(t)
    _check_latent_pair(z0, eps)
    ab = sched.alpha_bar(t)
    return (_as_f32(np.sqrt(ab)) * z0.astype(np.float32)
            + _as_f32(np.sqrt(1.0 - ab)) * eps.astype(np.float32))


def reverse_step(
    z_t: LatentCode,
    t: int,
    eps_pred: LatentCode,
    sched: NoiseSchedule,
    noise: Optional[LatentCode] = None,
) -> LatentCode:
    """One ancestral reverse update from step t to t-1:

        (1/sqrt(alpha_t)) * (z_t - ((1 - alpha_t)/sqrt(1 - abar_t)) * eps_pred)
            + sigma_t * noise

    The noise term is forced to zero at t=1, so the t=1 update lands on the
    clean latent.
    """
    sched._check_t(t)
    _check_latent_pair(z_t, eps_pred)
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    mean = (_as_f32(1.0 / np.sqrt(alpha))
            * (z_t.astype(np.float32)
               - _as_f32((1.0 - alpha) / np.sqrt(1.0 - ab)) * eps_pred.astype(np.float32)))
    sigma = sched.sigma(t)
    if t == 1 or sigma == 0.0:
        return mean
    if noise is None:
        raise ValueError(f"reverse_step at t={t} has sigma={sigma:g} > 0 and requires a noise draw")
    _check_latent_pair(z_t, noise)
    return mean + _as_f32(sigma) * noise.astype(np.float32)


def reverse_hop(z_t: LatentCode, t: int, s: int, eps_pred: LatentCode, sched: NoiseSchedule) -> LatentCode:
    """Deterministic skipped-step update from step t down to step s < t.

    Rescales through the predicted clean latent:
        z0_hat = (z_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t)
        z_s    = sqrt(abar_s) * z0_hat + sqrt(1 - abar_s) * eps_pred
    s = 0 returns z0_hat itself.
    """
    sched._check_t(t)
    if not 0 <= s < t:
        raise ValueError(f"hop target s={s} must satisfy 0 <= s < t={t}")
    _check_latent_pair(z_t, eps_pred)
    ab_t = sched.alpha_bar(t)
    z0_hat = (z_t.astype(np.float32) - _as_f32(np.sqrt(1.0 - ab_t)) * eps_pred.astype(np.float32)) \
        * _as_f32(1.0 / np.sqrt(ab_t))
    if s == 0:
        return z0_hat
    ab_s = sched.alpha_bar(s)
    return _as_f32(np.sqrt(ab_s)) * z0_hat + _as_f32(np.sqrt(1.0 - ab_s)) * eps_pred.astype(np.float32)


def make_step_sequence(t_prime: int, n_steps: int) -> list[int]:
    """Strictly decreasing timesteps visited by the reverse chain.

    Uniform stride with floor rounding: the sequence starts at t_prime and,
    for n_steps >= 2, ends at 1.  n_steps = 1 yields [t_prime] (a single
    prediction hops straight to the clean latent).
    """
    if t_prime < 1:
        raise ValueError(f"t_prime must be >= 1, got {t_prime}")
    if not 1 <= n_steps <= t_prime:
        raise ValueError(f"n_steps must satisfy 1 <= n_steps <= t_prime={t_prime}, got {n_steps}")
    if n_steps == 1:
        return [t_prime]
    seq = [int(np.floor(v)) for v in np.linspace(t_prime, 1.0, n_steps)]
    assert seq[0] == t_prime and seq[-1] == 1
    assert all(a > b for a, b in zip(seq, seq[1:])), "step sequence must strictly decrease"
    return seq


def run_reverse_chain(
    z_start: LatentCode,
    t_prime: int,
    n_steps: int,
    sched: NoiseSchedule,
    predict_noise: Callable[[LatentCode, int], LatentCode],
    ancestral_stream: Optional[np.random.Generator] = None,
) -> LatentCode:
    """Denoise z_start from step t_prime back to the clean latent.

    Adjacent visits (s = t - 1) use the ancestral `reverse_step` (drawing
    sigma_t-scaled noise from `ancestral_stream` when needed); larger jumps
    use the deterministic `reverse_hop`.  Pure function of its arguments plus
    the stream state.
    """
    seq = make_step_sequence(t_prime, n_steps)
    z = z_start
    for i, t in enumerate(seq):
        eps_pred = predict_noise(z, t)
        s = seq[i + 1] if i + 1 < len(seq) else (0 if t == 1 else 0)
        if s == t - 1:
            noise = None
            if t > 1 and sched.sigma(t) > 0.0:
                if ancestral_stream is None:
                    raise ValueError("posterior-noise reverse step requires an ancestral stream")
                noise = ancestral_stream.standard_normal(z.shape, dtype=np.float32)
            z = reverse_step(z, t, eps_pred, sched, noise)
        else:
            z = reverse_hop(z, t, s, eps_pred, sched)
    return z
