"""
Denoising-diffusion policy optimization of a cell-conditioned sampler
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from src.diffusion.sampler import GaussianDiffusion, argmax_one_hot, gaussian_logprob
from src.errors import ConfigError, ContractError, NumericalError, RegditError
from src.parallel import map_ordered
from src.reward.context import Context, compose
from src.tensor import functional as F
from src.tensor.optim import Adam
from src.tensor.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class DdpoConfig:
    """
    Defaults are the full-scale RL hyperparameters: lr 5e-5, 4 PPO epochs,
    16 rollouts per step, KL weight 0.5, 5000 steps.
    """
    lr: float = 5e-5
    ppo_epochs: int = 4
    batch: int = 16
    beta_kl: float = 0.5
    clip_eps: float = 0.2
    total_steps: int = 5000
    guidance: float = 2.0
    grad_clip: float = 1.0
    eval_every: int = 50
    eval_batch: int = 64

    def validate(self):
        if self.ppo_epochs < 1:
            raise ConfigError(f"ppo_epochs must be >= 1, got: {self.ppo_epochs}")
        if self.clip_eps <= 0:
            raise ConfigError(f"clip_eps must be > 0, got: {self.clip_eps}")
        if self.beta_kl < 0:
            raise ConfigError(f"beta_kl must be >= 0, got: {self.beta_kl}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got: {self.lr}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2 to whiten rewards, got: {self.batch}")
        if self.total_steps < 0 or self.eval_every < 0 or self.eval_batch < 1:
            raise ConfigError("total_steps and eval_every must be >= 0 and eval_batch >= 1")
        if self.guidance < 0:
            raise ConfigError(f"guidance must be >= 0, got: {self.guidance}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0 or null, got: {self.grad_clip}")
        return self


class Rollouts(list):
    """Scored trajectories; `failed` counts rollouts dropped after an oracle error."""

    def __init__(self, trajectories=(), failed: int = 0):
        super().__init__(trajectories)
        self.failed = failed


@dataclass
class UpdateMetrics:
    step: int
    mean_reward: float
    clip_fraction: float
    kl: float
    loss: float
    grad_norm: float
    n_trajectories: int
    n_failed: int = 0
    aborted: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def score(trajectories, oracle, context: Context) -> list:
    """Oracle reward of each trajectory's decoded sample, NaN where the oracle failed."""

    def one(trajectory):
        try:
            return float(oracle(compose(argmax_one_hot(trajectory.states[-1]), context), trajectory.cell))
        except (RegditError, OSError) as e:
            trajectory.info["error"] = str(e)
            return float("nan")

    return map_ordered(one, trajectories)


def rollout(params, diffusion: GaussianDiffusion, oracle, context: Context, n: int, rng,
            w: float = 2.0) -> Rollouts:
    """
    Sample n guided reverse chains with uniformly drawn cells and score them.

    Returns:
        Rollouts of the successfully scored trajectories
    """
    if n < 0:
        raise ContractError(f"n must be >= 0, got: {n}")
    if n == 0:
        return Rollouts()
    cells = rng.integers(0, params.config.num_cells, size=n)
    _, trajectories = diffusion.sample(params, cells, w, rng, record=True)
    kept, failed = [], 0
    for trajectory, reward in zip(trajectories, score(trajectories, oracle, context)):
        if np.isfinite(reward):
            trajectory.reward = reward
            kept.append(trajectory)
        else:
            trajectory.failed = True
            failed += 1
    if failed:
        logger.warning("Excluded %d of %d rollouts after oracle failures", failed, n)
    return Rollouts(kept, failed)


def step_logprob(params, x_t, x_prev, t: int, cell, w: float, diffusion: GaussianDiffusion):
    """
    log N(x_prev; mu(x_t, t, cell), sigma_t^2 I) summed over all 4×L entries,
    with mu from the guided noise estimate at scale w.
    """
    if t < 1:
        raise ContractError(f"the t=0 step is deterministic and has no log-prob, got t={t}")
    diffusion.schedule.check_timestep(t)
    with no_grad():
        mean = diffusion.reverse_mean(params, x_t, t, cell, w).data
    return gaussian_logprob(x_prev, mean, float(diffusion.schedule.posterior_variance[t]))


def recompute_logprobs(params, trajectories, diffusion: GaussianDiffusion) -> np.ndarray:
    """
    Per-trajectory log-probs of every stochastic step, batched per timestep
    the way the sampler ran them.

    Returns:
        (n, T-1) array ordered like Trajectory.logprob_old
    """
    T = diffusion.schedule.T
    out = np.zeros((len(trajectories), T - 1))
    cells = np.array([tr.cell for tr in trajectories])
    for t in range(T - 1, 0, -1):
        x_t = np.stack([tr.state_before(t) for tr in trajectories])
        x_prev = np.stack([tr.state_after(t) for tr in trajectories])
        out[:, T - 1 - t] = step_logprob(params, x_t, x_prev, t, cells, trajectories[0].guidance_scale, diffusion)
    return out


def whiten(rewards) -> np.ndarray:
    """(r - mean) / (std + 1e-8) with the population std."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ContractError(f"whiten needs at least 2 rewards, got: {rewards.size}")
    return (rewards - rewards.mean()) / (rewards.std() + 1e-8)


def ppo_loss(logprob_new: Tensor, logprob_old, advantages, clip_eps: float):
    """
    Clipped surrogate -mean(min(r A, clip(r, 1-eps, 1+eps) A)) with
    r = exp(logprob_new - logprob_old).

    Returns:
        (loss Tensor, ratio np.ndarray)
    """
    ratio = F.exp(logprob_new - Tensor(np.asarray(logprob_old, dtype=logprob_new.dtype)))
    adv = Tensor(np.asarray(advantages, dtype=logprob_new.dtype))
    unclipped = ratio * adv
    clipped = F.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -F.minimum(unclipped, clipped).mean(), ratio.data


def _logprob_tensor(x_prev: np.ndarray, mean: Tensor, variance: float) -> Tensor:
    diff = Tensor(np.asarray(x_prev, dtype=np.float64)) - mean
    n = diff.shape[-1] * diff.shape[-2]
    return (diff * diff).sum(axis=(1, 2)) * (-0.5 / variance) - 0.5 * n * np.log(2.0 * np.pi * variance)


def ppo_update(params, ref_params, trajectories, cfg: DdpoConfig, diffusion: GaussianDiffusion,
               optimizer: Adam, rng, step: int = 0) -> UpdateMetrics:
    """
    ppo_epochs passes over the rollout batch. Each pass visits every
    stochastic timestep in shuffled order, accumulates the clipped-surrogate
    and KL-to-reference gradients of all (trajectory, timestep) pairs and
    takes one Adam step. A non-finite loss or gradient restores the
    parameters of the call and flags the metrics as aborted.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ContractError("ppo_update needs a nonempty trajectory batch")
    rewards = np.array([tr.reward for tr in trajectories], dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise ContractError("every trajectory needs a finite reward before ppo_update")
    advantages = whiten(rewards)
    sched = diffusion.schedule
    T = sched.T
    timesteps = np.arange(T - 1, 0, -1)
    pairs = len(trajectories) * len(timesteps)
    cells = np.array([tr.cell for tr in trajectories])
    w = trajectories[0].guidance_scale
    snapshot = {name: p.data.copy() for name, p in params.items()}
    adam_snapshot = ({k: v.copy() for k, v in optimizer.m.items()}, {k: v.copy() for k, v in optimizer.v.items()},
                     optimizer.step_count)

    clipped = kl_total = loss_total = 0.0
    grad_norm = 0.0
    try:
        for _ in range(cfg.ppo_epochs):
            optimizer.zero_grad()
            for t in rng.permutation(timesteps):
                t = int(t)
                variance = float(sched.posterior_variance[t])
                x_t = np.stack([tr.state_before(t) for tr in trajectories])
                x_prev = np.stack([tr.state_after(t) for tr in trajectories])
                old = np.array([tr.logprob_old[T - 1 - t] for tr in trajectories])

                mean = diffusion.reverse_mean(params, x_t, t, cells, w).astype(np.float64)
                surrogate, ratio = ppo_loss(_logprob_tensor(x_prev, mean, variance), old, advantages, cfg.clip_eps)
                loss = surrogate * (len(trajectories) / pairs)
                if cfg.beta_kl > 0:
                    with no_grad():
                        ref_mean = diffusion.reverse_mean(ref_params, x_t, t, cells, w).data.astype(np.float64)
                    gap = mean - Tensor(ref_mean)
                    kl = (gap * gap).sum(axis=(1, 2)) * (0.5 / variance)
                    loss = loss + kl.sum() * (cfg.beta_kl / pairs)
                    kl_total += float(kl.data.sum())
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite DDPO loss at t={t}")
                backward(loss)
                loss_total += loss.item()
                clipped += float(np.sum(np.abs(ratio - 1.0) > cfg.clip_eps))
            grad_norm = optimizer.step()
    except NumericalError as e:
        for name, p in params.items():
            p.data = snapshot[name]
        optimizer.m, optimizer.v, optimizer.step_count = adam_snapshot
        optimizer.zero_grad()
        logger.warning("Step %d aborted, parameters restored: %s", step, e)
        return UpdateMetrics(step=step, mean_reward=float(rewards.mean()), clip_fraction=float("nan"),
                             kl=float("nan"), loss=float("nan"), grad_norm=float("nan"),
                             n_trajectories=len(trajectories), aborted=True)

    visits = cfg.ppo_epochs * pairs
    return UpdateMetrics(
        step=step,
        mean_reward=float(rewards.mean()),
        clip_fraction=clipped / visits,
        kl=kl_total / visits,
        loss=loss_total / cfg.ppo_epochs,
        grad_norm=grad_norm,
        n_trajectories=len(trajectories),
    )


class DDPOTrainer:
    """
    The cell-conditioned RL loop: draw cells uniformly, sample guided
    trajectories, score them in context, update against a frozen reference.

    params DenoiserParams: policy, updated in place
    diffusion GaussianDiffusion: schedule and guidance plumbing
    oracle RewardOracle: reward f_c
    context Context: composition of inserts before scoring
    cfg DdpoConfig: hyperparameters
    seed int: every step draws from a generator keyed on (seed, step)
    """

    def __init__(self, params, diffusion: GaussianDiffusion, oracle, context: Context, cfg: DdpoConfig,
                 seed: int = 0):
        self.params = params
        self.ref_params = params.copy(requires_grad=False)
        self.diffusion = diffusion
        self.oracle = oracle
        self.context = context
        self.cfg = cfg.validate()
        self.seed = seed
        self.optimizer = Adam(dict(params.items()), lr=cfg.lr, grad_clip=cfg.grad_clip)
        self.history = []
        self.snapshots = []
        self.best_reward = -np.inf
        self.best_arrays = None

    def step(self, step: int, on_rollout=None) -> UpdateMetrics:
        """
        One rollout and PPO update. `on_rollout(step, batch)` sees the scored
        batch before any parameter changes.
        """
        rng = np.random.default_rng([self.seed, step])
        batch = rollout(self.params, self.diffusion, self.oracle, self.context, self.cfg.batch, rng,
                        w=self.cfg.guidance)
        if on_rollout:
            on_rollout(step, batch)
        if len(batch) < 2:
            logger.warning("Step %d skipped: only %d rollouts scored", step, len(batch))
            metrics = UpdateMetrics(step=step, mean_reward=float("nan"), clip_fraction=float("nan"),
                                    kl=float("nan"), loss=float("nan"), grad_norm=float("nan"),
                                    n_trajectories=len(batch), n_failed=batch.failed, aborted=True)
        else:
            metrics = ppo_update(self.params, self.ref_params, batch, self.cfg, self.diffusion,
                                 self.optimizer, rng, step=step)
            metrics.n_failed = batch.failed
        self.history.append(metrics)
        logger.info("Step %d - mean reward: %.4f - clip fraction: %.3f - kl: %.4f",
                    step, metrics.mean_reward, metrics.clip_fraction, metrics.kl)
        return metrics

    def evaluate(self) -> float:
        """Mean reward of a fixed-seed batch with cells spread evenly."""
        rng = np.random.default_rng([self.seed, 2 ** 31 - 1])
        cells = np.arange(self.cfg.eval_batch) % self.params.config.num_cells
        _, trajectories = self.diffusion.sample(self.params, cells, self.cfg.guidance, rng, record=True)
        rewards = np.array(score(trajectories, self.oracle, self.context))
        return float(np.nanmean(rewards)) if np.any(np.isfinite(rewards)) else float("nan")

    def snapshot(self, step: int) -> float:
        reward = self.evaluate()
        self.snapshots.append({"step": step, "mean_reward": reward})
        if np.isfinite(reward) and reward > self.best_reward:
            self.best_reward = reward
            self.best_arrays = {name: a.copy() for name, a in self.params.to_arrays().items()}
        logger.info("Evaluation at step %d - mean reward: %.4f", step, reward)
        return reward

    def run(self, steps: int = None, on_step=None, on_snapshot=None, on_rollout=None):
        """
        Run `steps` updates (default total_steps) with an evaluation snapshot
        before the first step, every eval_every steps and after the last.
        """
        steps = self.cfg.total_steps if steps is None else steps
        self.snapshot(0)
        if on_snapshot:
            on_snapshot(self.snapshots[-1])
        for step in range(1, steps + 1):
            metrics = self.step(step, on_rollout=on_rollout)
            if on_step:
                on_step(metrics)
            if (self.cfg.eval_every and step % self.cfg.eval_every == 0) or step == steps:
                if self.snapshots[-1]["step"] != step:
                    self.snapshot(step)
                    if on_snapshot:
                        on_snapshot(self.snapshots[-1])
        logger.info("Best evaluation reward: %.4f", self.best_reward)
        return self.history

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.to_dict() for m in self.history])
