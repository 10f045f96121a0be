"""Return-driven bias calibration for TD targets.

The calibrator keeps a bias-controlling parameter beta inside
[beta_min, beta_max] together with a bounded batch of recent on-policy
(state, action, discounted return) records. At episode boundaries, once
enough environment steps have passed, it compares the critic's value
estimates against the observed returns and nudges beta by a normalized
step: overestimation lowers beta, underestimation raises it. For the
truncated-quantile critic the parameter maps to the per-network drop
count d = d_max - beta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


def discounted_returns(
    rewards: np.ndarray,
    entropy_bonuses: np.ndarray | None = None,
    gamma: float = 0.99,
    include_entropy: bool = False,
) -> np.ndarray:
    """Per-step discounted returns-to-go by backward accumulation.

    R_t = r_t (+ bonus_t when include_entropy) + gamma * R_{t+1}, with
    R at the final step equal to its own (possibly bonus-augmented) reward.
    """
    rewards = np.asarray(rewards, dtype=float)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    if rewards.size == 0:
        return np.zeros(0)
    if include_entropy:
        if entropy_bonuses is None:
            raise ValueError("include_entropy requires entropy bonuses")
        bonuses = np.asarray(entropy_bonuses, dtype=float)
        if bonuses.shape != rewards.shape:
            raise ValueError("rewards and entropy bonuses must align")
        rewards = rewards + bonuses
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class EpisodeReturns:
    """Per-step (state, action, return) records of one completed episode."""

    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    episode_id: int
    timed_out: bool = False

    def __len__(self) -> int:
        return self.returns.shape[0]


@dataclass
class CalibratorState:
    """Bias parameter, its update schedule, and the recent-return batch."""

    beta: float
    beta_min: float = 0.0
    beta_max: float = 5.0
    step_size: float = 0.1
    update_interval: int = 1000
    warmup_steps: int = 25000
    batch_cap: int = 5000
    ma_rate: float = 0.05
    timeout_tail_exclusion: int = 0
    pinned: bool = False
    ma: float | None = None
    last_update_step: int = 0
    episodes: list[EpisodeReturns] = field(default_factory=list)

    @property
    def n_records(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def drop_level(self, d_max: float) -> float:
        """Truncation level d = d_max - beta for quantile-critic use."""
        return d_max - self.beta


def record_episode(state: CalibratorState, episode: EpisodeReturns) -> None:
    """Append one completed episode's records; pruning waits for the next update.

    If a tail-exclusion window is configured, the last steps of episodes
    that ended by timeout are not stored (their short-horizon returns do
    not match a value that bootstraps past the cutoff).
    """
    n = len(episode)
    if n == 0:
        return
    if episode.timed_out and state.timeout_tail_exclusion > 0:
        keep = n - state.timeout_tail_exclusion
        if keep <= 0:
            return
        episode = EpisodeReturns(
            episode.states[:keep],
            episode.actions[:keep],
            episode.returns[:keep],
            episode.episode_id,
            episode.timed_out,
        )
    state.episodes.append(episode)


def maybe_update(
    state: CalibratorState,
    q_estimator,
    total_env_steps: int,
) -> tuple[bool, dict]:
    """One normalized step of the bias parameter, if the schedule allows.

    Call at episode boundaries. When at least `update_interval` steps have
    passed since the last update and warmup is over, computes the residual
    sum C = sum(Q_hat(s, a) - R(s, a)) over the stored batch, refreshes the
    moving average of |C|, moves beta by -step_size * C / ma (clipped to
    the allowed interval), and prunes the oldest episodes until at most
    `batch_cap` records remain. Returns (did_update, info).
    """
    info: dict = {"env_step": total_env_steps}
    if state.pinned:
        return False, info
    if total_env_steps - state.last_update_step < state.update_interval:
        return False, info
    if total_env_steps <= state.warmup_steps:
        return False, info
    if not state.episodes:
        logger.warning("calibrator update skipped at step %d: no stored returns", total_env_steps)
        info["skipped"] = "empty return batch"
        return False, info

    states = np.concatenate([ep.states for ep in state.episodes])
    actions = np.concatenate([ep.actions for ep in state.episodes])
    returns = np.concatenate([ep.returns for ep in state.episodes])
    estimates = np.asarray(q_estimator(states, actions), dtype=float)
    c = float(np.sum(estimates - returns))

    abs_c = abs(c)
    if state.ma is None:
        state.ma = abs_c
    else:
        state.ma = (1.0 - state.ma_rate) * state.ma + state.ma_rate * abs_c
    if c != 0.0 and state.ma > 0.0:
        state.beta = float(np.clip(state.beta - state.step_size * c / state.ma, state.beta_min, state.beta_max))
    state.last_update_step = total_env_steps

    # Drop whole episodes oldest-first; the newest episode always survives.
    while state.n_records > state.batch_cap and len(state.episodes) > 1:
        state.episodes.pop(0)

    info.update(C=c, ma=state.ma, beta=state.beta, n_records=state.n_records)
    return True, info


def generic_qbeta(q_hat: float, beta: float, scale_constant: float = 100.0) -> float:
    """Generic monotone family beta * |q| / K + q around a base estimate q."""
    if scale_constant <= 0:
        raise ValueError("scale constant must be positive")
    return beta * abs(q_hat) / scale_constant + q_hat


def _bisect_increasing(fn, lo, hi, target, tol: float = 1e-10, max_iter: int = 200):
    """Solve fn(x) = target for monotone increasing fn, clamping to [lo, hi].

    Array friendly: target may be a vector, solved elementwise.
    """
    target = np.asarray(target, dtype=float)
    lo0 = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi0 = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    at_hi = fn(hi0) <= target
    at_lo = fn(lo0) >= target
    lo_b, hi_b = lo0.copy(), hi0.copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo_b + hi_b)
        too_low = fn(mid) < target
        lo_b = np.where(too_low, mid, lo_b)
        hi_b = np.where(too_low, hi_b, mid)
        if np.max(hi_b - lo_b) < tol:
            break
    x = 0.5 * (lo_b + hi_b)
    return np.where(at_hi, hi0, np.where(at_lo, lo0, x))


def beta_star(
    samples: np.ndarray,
    q_family,
    beta_min: float,
    beta_max: float,
    tol: float = 1e-10,
) -> float:
    """Best beta in [beta_min, beta_max]: argmin |Q_beta - mean(samples)|.

    q_family must be continuous and monotone increasing, so the argmin is
    the solve of Q_beta = mean(samples) when the mean is attainable and
    the nearer boundary otherwise; found by bisection.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("need at least one return sample")
    target = samples.mean()
    if q_family(beta_min) >= target:
        return float(beta_min)
    if q_family(beta_max) <= target:
        return float(beta_max)
    return float(_bisect_increasing(q_family, beta_min, beta_max, target, tol))
