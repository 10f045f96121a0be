"""Uniform replay buffer and the on-policy return tracker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrator import EpisodeReturns, discounted_returns


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    true_terminal: np.ndarray
    timeout: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform with-replacement sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self.cursor = 0
        self._states = np.zeros((capacity, state_dim), dtype=dtype)
        self._actions = np.zeros((capacity, action_dim), dtype=dtype)
        self._rewards = np.zeros(capacity, dtype=dtype)
        self._next_states = np.zeros((capacity, state_dim), dtype=dtype)
        self._true_terminal = np.zeros(capacity, dtype=bool)
        self._timeout = np.zeros(capacity, dtype=bool)

    def push(self, state, action, reward, next_state, true_terminal, timeout) -> None:
        i = self.cursor
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        self._next_states[i] = next_state
        self._true_terminal[i] = true_terminal
        self._timeout[i] = timeout
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return TransitionBatch(
            states=self._states[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx],
            true_terminal=self._true_terminal[idx],
            timeout=self._timeout[idx],
        )


class ReturnTracker:
    """Accumulates one in-flight episode and flushes it as return records."""

    def __init__(self):
        self._states: list[np.ndarray] = []
        self._actions: list[np.ndarray] = []
        self._rewards: list[float] = []
        self._bonuses: list[float] = []
        self.episode_count = 0

    def __len__(self) -> int:
        return len(self._rewards)

    def record_step(self, state, action, reward: float, entropy_bonus: float = 0.0) -> None:
        self._states.append(np.asarray(state, dtype=float).copy())
        self._actions.append(np.asarray(action, dtype=float).copy())
        self._rewards.append(float(reward))
        self._bonuses.append(float(entropy_bonus))

    def finish_episode(
        self, gamma: float, include_entropy: bool = False, timed_out: bool = False
    ) -> EpisodeReturns:
        """Emit one record per step of the completed episode and clear."""
        if not self._rewards:
            raise ValueError("finish_episode called with no recorded steps")
        returns = discounted_returns(
            np.array(self._rewards), np.array(self._bonuses), gamma, include_entropy
        )
        episode = EpisodeReturns(
            states=np.stack(self._states),
            actions=np.stack(self._actions),
            returns=returns,
            episode_id=self.episode_count,
            timed_out=timed_out,
        )
        self.episode_count += 1
        self._states, self._actions, self._rewards, self._bonuses = [], [], [], []
        return episode
