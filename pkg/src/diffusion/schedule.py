"""
Linear DDPM noise schedule and the closed-form forward process
"""
from dataclasses import dataclass

import numpy as np

from src.errors import ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    """
    T int: number of diffusion steps
    beta np.ndarray: per-step noise variances
    alpha np.ndarray: 1 - beta
    alpha_bar np.ndarray: cumulative product of alpha
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        """beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t=0."""
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def check_timestep(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ContractError(f"timestep {t.tolist()} outside [0, {self.T})")


def linear_schedule(T: int = 100, beta_start: float = 3e-4, beta_end: float = 0.25) -> NoiseSchedule:
    """
    Betas linearly spaced from beta_start to beta_end inclusive.

    T int: number of steps, at least 1
    beta_start float: first beta, 0 < beta_start <= beta_end
    beta_end float: last beta, below 1
    """
    if T < 1:
        raise ContractError(f"T must be >= 1, got: {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got: {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    x0 np.ndarray: 4×L sample or B×4×L batch
    t int | np.ndarray: one timestep, or one per batch element
    eps np.ndarray: standard-normal draw with the shape of x0
    """
    sched.check_timestep(t)
    alpha_bar = np.asarray(sched.alpha_bar[t])
    if alpha_bar.ndim:
        alpha_bar = alpha_bar.reshape(-1, *([1] * (x0.ndim - 1)))
    out = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    return out.astype(x0.dtype)
