"""
DDPM training loss, classifier-free guidance and the ancestral reverse sampler
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from src.data.sequences import decode
from src.denoiser.dit import forward
from src.diffusion.schedule import NoiseSchedule, q_sample
from src.errors import ConfigError, ContractError
from src.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """
    guidance_scale float: w in eps_uncond + w (eps_cond - eps_uncond)
    p_uncond float: probability of dropping the condition during training
    """
    guidance_scale: float = 2.0
    p_uncond: float = 0.1

    def validate(self):
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got: {self.guidance_scale}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must be in [0, 1), got: {self.p_uncond}")
        return self


@dataclass
class StepStats:
    """Reverse-kernel statistics of one transition: N(mean, variance I)."""
    mean: np.ndarray
    variance: float
    t: int


@dataclass
class Trajectory:
    """
    One reverse chain x_T ... x_0 with the log-probs it was sampled under.

    states np.ndarray: (T+1, 4, L), states[0] is the initial noise
    step_stats list[StepStats]: one per transition, timesteps T-1 down to 0
    logprob_old np.ndarray: per-step log-probs for timesteps T-1 down to 1;
        the deterministic t=0 step has no entry
    """
    cell: int
    states: np.ndarray
    step_stats: list
    logprob_old: np.ndarray
    guidance_scale: float
    reward: float = float("nan")
    failed: bool = False
    info: dict = field(default_factory=dict)

    @property
    def sample(self) -> np.ndarray:
        return argmax_one_hot(self.states[-1])

    @property
    def bases(self) -> str:
        return decode(self.states[-1])

    def state_before(self, t: int) -> np.ndarray:
        """Input x_t of the transition at timestep t."""
        return self.states[len(self.states) - 2 - t]

    def state_after(self, t: int) -> np.ndarray:
        return self.states[len(self.states) - 1 - t]


def argmax_one_hot(x: np.ndarray) -> np.ndarray:
    """Per-column argmax over the 4 base channels (lowest index wins ties)."""
    index = np.argmax(x, axis=-2)
    out = np.zeros_like(x)
    np.put_along_axis(out, np.expand_dims(index, -2), 1, axis=-2)
    return out


def gaussian_logprob(x: np.ndarray, mean: np.ndarray, variance: float) -> np.ndarray:
    """
    log N(x; mean, variance I) summed over the trailing 4×L entries, in float64.
    Returns one value per leading batch element (a scalar for a single 4×L).
    """
    if variance <= 0:
        raise ContractError(f"log-prob needs a positive variance, got: {variance}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    n = diff.shape[-1] * diff.shape[-2]
    quad = (diff ** 2).sum(axis=(-1, -2))
    return quad * (-0.5 / variance) - 0.5 * n * np.log(2.0 * np.pi * variance)


class GaussianDiffusion:
    """
    Continuous DDPM over one-hot DNA with an epsilon-predicting denoiser.

    schedule NoiseSchedule: beta/alpha arrays
    sampler SamplerConfig: guidance scale and condition dropout
    denoise callable: (params, x_t, t, cells, train_mode=, rng=) -> Tensor
    null_id int: unconditional cell id; defaults to params.config.num_cells
    """

    def __init__(self, schedule: NoiseSchedule, sampler: SamplerConfig = SamplerConfig(),
                 denoise=forward, null_id: int = None):
        self.schedule = schedule
        self.sampler = sampler.validate()
        self.denoise = denoise
        self.null_id = null_id

    def _null(self, params) -> int:
        return self.null_id if self.null_id is not None else params.config.num_cells

    def ddpm_loss(self, params, batch: np.ndarray, cells, rng, train_mode: bool = True) -> Tensor:
        """
        Mean squared error between predicted and true noise. Timesteps are
        uniform per example and each condition is replaced by the null id
        with probability p_uncond.
        """
        batch = np.asarray(batch)
        if len(batch) == 0:
            raise ContractError("ddpm_loss needs a nonempty batch")
        size = len(batch)
        t = rng.integers(0, self.schedule.T, size=size)
        eps = rng.standard_normal(batch.shape).astype(batch.dtype)
        drop = rng.random(size) < self.sampler.p_uncond
        cells = np.where(drop, self._null(params), np.asarray(cells))
        x_t = q_sample(batch, t, eps, self.schedule)
        pred = self.denoise(params, x_t, t, cells, train_mode=train_mode, rng=rng)
        diff = pred - Tensor(eps.astype(pred.dtype))
        return (diff * diff).mean()

    def guided_eps(self, params, x_t, t, cell, w: float, return_branches: bool = False):
        """
        eps_uncond + w (eps_cond - eps_uncond), both branches from one stacked
        forward pass. w=0 and w=1 return the unconditional and conditional
        branch themselves.
        """
        x = np.asarray(x_t)
        single = x.ndim == 2
        if single:
            x = x[None]
        size = len(x)
        null = self._null(params)
        cells = np.broadcast_to(np.asarray(cell, dtype=np.int64), (size,))
        if np.any(cells == null):
            raise ContractError("guided_eps needs a real cell, not the null class")
        t_all = np.broadcast_to(np.asarray(t, dtype=np.int64), (size,))
        both = self.denoise(params, np.concatenate([x, x]), np.concatenate([t_all, t_all]),
                            np.concatenate([cells, np.full(size, null)]), train_mode=False, rng=None)
        cond, uncond = both[:size], both[size:]
        if w == 0:
            guided = uncond
        elif w == 1:
            guided = cond
        else:
            guided = uncond + w * (cond - uncond)
        if single:
            guided, cond, uncond = guided[0], cond[0], uncond[0]
        return (guided, cond, uncond) if return_branches else guided

    def reverse_mean(self, params, x_t, t: int, cell, w: float) -> Tensor:
        """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t), differentiable."""
        sched = self.schedule
        eps_hat = self.guided_eps(params, x_t, t, cell, w)
        coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
        x = Tensor(np.asarray(x_t).astype(eps_hat.dtype))
        return (x - eps_hat * coef) * (1.0 / np.sqrt(sched.alpha[t]))

    def p_step(self, params, x_t, t: int, cell, w: float, noise=None):
        """
        One ancestral step x_t -> x_{t-1} with the posterior variance. At t=0
        the step is deterministic; absent noise counts as zero noise.

        Returns:
            (x_prev np.ndarray, StepStats)
        """
        self.schedule.check_timestep(t)
        with no_grad():
            mean = self.reverse_mean(params, x_t, t, cell, w).data
        variance = float(self.schedule.posterior_variance[t]) if t > 0 else 0.0
        if noise is None or t == 0:
            x_prev = mean.copy()
        else:
            x_prev = (mean + np.sqrt(variance) * np.asarray(noise)).astype(mean.dtype)
        return x_prev, StepStats(mean=mean, variance=variance, t=t)

    def sample(self, params, cells, w: float, rng, record: bool = False, dtype=None):
        """
        Run the full reverse chain from standard-normal noise for each cell id.

        Returns:
            (one-hot samples (n,4,L), list of Trajectory or None)
        """
        cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
        dtype = dtype or params.dtype
        length = params.config.seq_len
        x = rng.standard_normal((len(cells), 4, length)).astype(dtype)
        states, stats, logprobs = [x], [], []
        for t in reversed(range(self.schedule.T)):
            noise = rng.standard_normal(x.shape).astype(dtype) if t > 0 else None
            x, step = self.p_step(params, x, t, cells, w, noise)
            if record:
                states.append(x)
                stats.append(step)
                if t > 0:
                    logprobs.append(gaussian_logprob(x, step.mean, step.variance))
        samples = argmax_one_hot(x)
        if not record:
            return samples, None

        stacked = np.stack(states, axis=1)
        logprob_matrix = np.stack(logprobs, axis=1) if logprobs else np.zeros((len(cells), 0))
        trajectories = [
            Trajectory(
                cell=int(cell),
                states=stacked[i],
                step_stats=[StepStats(mean=s.mean[i], variance=s.variance, t=s.t) for s in stats],
                logprob_old=logprob_matrix[i],
                guidance_scale=w,
            )
            for i, cell in enumerate(cells)
        ]
        return samples, trajectories


def ddpm_loss(params, batch, cells, rng, diffusion: GaussianDiffusion) -> Tensor:
    return diffusion.ddpm_loss(params, batch, cells, rng)
