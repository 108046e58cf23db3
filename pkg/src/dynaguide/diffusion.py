"""Variance-preserving diffusion arithmetic.

The forward process is

    z_t = sqrt(alpha_bar_t) * z_0 + sigma_t * eps,    eps ~ N(0, I)

with alpha_bar_t = prod_{i<=t} (1 - beta_i) and sigma_t = sqrt(1 - alpha_bar_t),
so sigma_t^2 + alpha_bar_t = 1 at every step.  Steps are 1-based: t runs
T..1 during sampling and t = 0 denotes clean data.

Reverse sampling uses the score form

    z_{t-1} = (1 + beta_t / 2) * z_t + beta_t * score + sqrt(beta_t) * noise

where score is an estimate of grad log p_t(z_t); a noise-predicting network
converts via score = -eps_hat / sigma_t.  The guided variant replaces the
mean with a gradient step whose magnitude follows a Polyak-style rule, and
time travel renoises z_{t-1} back to step t with fresh noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DegenerateGradientError, NumericsError

# Below this, 1/sqrt(alpha_bar) amplifies noise beyond anything meaningful.
ALPHA_BAR_FLOOR = 1e-12
GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed tables for a variance-preserving schedule.

    Tables are float64 and indexed by step; index 0 holds the clean-data
    conventions (beta = 0, alpha_bar = 1, sigma = 0) so that ``betas[t]``
    is meaningful for t in 0..T without off-by-one gymnastics.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def _check_step(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"step index must be an integer, got {type(t).__name__}")
        if not 0 <= t <= self.T:
            raise IndexError(f"step index {t} outside 0..{self.T}")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_step(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_step(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check_step(t)])


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a schedule with beta interpolated linearly from start to end.

    For T = 1 the single beta equals beta_start.  Raises ConfigError naming
    the offending parameter when T < 1 or the betas leave (0, 1).
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool):
        raise ConfigError(f"T must be an integer, got {T!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0.0 < beta_end < 1.0:
        raise ConfigError(f"beta_end must lie in (0, 1), got {beta_end}")
    if beta_end < beta_start:
        raise ConfigError(
            f"beta_end ({beta_end}) must be >= beta_start ({beta_start})"
        )

    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    betas = np.concatenate([[0.0], betas])
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt(1.0 - alpha_bars)
    return NoiseSchedule(T=int(T), betas=betas, alpha_bars=alpha_bars, sigmas=sigmas)


DEFAULT_T = 50
DEFAULT_BETA_START = 0.02
DEFAULT_BETA_END = 0.30


def default_schedule() -> NoiseSchedule:
    """The stock schedule for the toy stack: 50 steps, betas 0.02 to 0.30.

    Short enough for CPU sampling while driving the terminal signal level
    below 2e-4 of the data variance, so the terminal state is
    indistinguishable from pure noise.
    """
    return make_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)


def _require_same_shape(a: torch.Tensor, b: torch.Tensor, names: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(
    z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Diffuse clean data to step t with the given noise draw."""
    t = schedule._check_step(t)
    if t == 0:
        return z0.clone()
    _require_same_shape(z0, eps, "z0/eps")
    return np.sqrt(schedule.alpha_bar(t)) * z0 + schedule.sigma(t) * eps


def predict_clean(z_t: torch.Tensor, score: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """One-step clean prediction from a score estimate.

        z0_hat = (z_t + (1 - alpha_bar_t) * score) / sqrt(alpha_bar_t)

    Equivalent to (z_t - sigma_t * eps_hat) / sqrt(alpha_bar_t) under
    score = -eps_hat / sigma_t.  Differentiable through both inputs.
    """
    t = schedule._check_step(t)
    if t == 0:
        return z_t
    _require_same_shape(z_t, score, "z_t/score")
    a_bar = schedule.alpha_bar(t)
    if a_bar < ALPHA_BAR_FLOOR:
        raise NumericsError(
            f"alpha_bar({t}) = {a_bar:.3e} < {ALPHA_BAR_FLOOR:.0e}; one-step "
            "prediction would amplify noise unboundedly. Use a schedule with "
            "fewer steps or a smaller beta_end, or floor the step index."
        )
    return (z_t + (1.0 - a_bar) * score) / np.sqrt(a_bar)


def reverse_step(
    z_t: torch.Tensor,
    score: torch.Tensor,
    t: int,
    noise: torch.Tensor | None,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Unguided reverse transition from step t to t-1.

    ``noise`` must be None (or is ignored as zero) at t = 1 so the final
    step is deterministic.
    """
    t = schedule._check_step(t)
    if t == 0:
        raise IndexError("reverse_step needs t >= 1")
    _require_same_shape(z_t, score, "z_t/score")
    beta = schedule.beta(t)
    mean = (1.0 + beta / 2.0) * z_t + beta * score
    if t == 1 or noise is None:
        return mean
    _require_same_shape(z_t, noise, "z_t/noise")
    return mean + np.sqrt(beta) * noise


def guided_update(
    mean: torch.Tensor,
    grad: torch.Tensor,
    eta: float,
    score_norm: float,
    grad_norm: float,
) -> torch.Tensor:
    """Move the reverse-step mean against a guidance gradient.

        z <- mean - eta * (score_norm / grad_norm) * grad / ||grad||

    With grad_norm = ||grad|| this is the Polyak-style step
    mean - eta * (score_norm / ||grad||^2) * grad, whose magnitude
    eta * score_norm / ||grad|| stays bounded however the objective is
    scaled.  The tensor contributes direction only and the denominator is
    the caller-recorded scalar, so the output is invariant to positive
    rescaling of ``grad``.  Raises DegenerateGradientError when the
    gradient is too small to normalize.
    """
    _require_same_shape(mean, grad, "mean/grad")
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    if grad_norm < GRAD_NORM_FLOOR or not np.isfinite(grad_norm):
        raise DegenerateGradientError(
            f"guidance gradient norm {grad_norm:.3e} is unusable"
        )
    direction_norm = float(torch.linalg.vector_norm(grad.detach()))
    if direction_norm < GRAD_NORM_FLOOR or not np.isfinite(direction_norm):
        raise DegenerateGradientError(
            f"guidance gradient tensor norm {direction_norm:.3e} is unusable"
        )
    magnitude = eta * score_norm / grad_norm
    return mean - (magnitude / direction_norm) * grad


def renoise(
    z_prev: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Send a step t-1 state back to step t for another pass.

        z_t = sqrt(1 - beta_t) * z_{t-1} + sqrt(beta_t) * noise

    Preserves the forward marginal: if z_{t-1} ~ N(sqrt(alpha_bar_{t-1}) z0,
    sigma_{t-1}^2 I) then z_t has exactly the step t marginal.
    """
    t = schedule._check_step(t)
    if t == 0:
        raise IndexError("renoise needs t >= 1")
    _require_same_shape(z_prev, noise, "z_prev/noise")
    beta = schedule.beta(t)
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * noise
