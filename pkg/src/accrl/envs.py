"""Desk-scale episodic continuous-control tasks.

Both tasks are deterministic and value-like: `step` is a pure function of
(state, action, step index), so environments can be cloned or shared
freely. Episodes end only by timeout; the timeout flag is reported
separately from true termination so critics can keep bootstrapping
through the cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    reward_floor: float


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    true_terminal: bool
    timeout: bool


class Pendulum:
    """Torque-limited swing-up of a rigid pendulum.

    State is (cos th, sin th, thdot) with th = 0 upright. Dynamics use a
    semi-implicit Euler step (velocity first) of
        thdot' = thdot + (3 g / (2 l) sin th + 3 u / (m l^2)) dt
        th'    = th + thdot' dt
    with g = 10, m = l = 1, dt = 0.05, torque clipped to +-2 and speed to
    +-8. Reward is -(th^2 + 0.1 thdot^2 + 0.001 u^2) with th wrapped to
    [-pi, pi], so it is bounded below by -(pi^2 + 6.4 + 0.004).
    """

    gravity = 10.0
    mass = 1.0
    length = 1.0
    dt = 0.05
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec(
            name="pendulum",
            obs_dim=3,
            action_dim=1,
            action_low=np.array([-self.max_torque]),
            action_high=np.array([self.max_torque]),
            max_episode_steps=max_episode_steps,
            reward_floor=-(np.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2),
        )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(-np.pi, np.pi)
        thdot = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), thdot])

    def step(self, state: np.ndarray, action: np.ndarray, step_index: int = 0) -> StepResult:
        if not np.all(np.isfinite(state)):
            raise RuntimeError("pendulum state is not finite")
        theta = np.arctan2(state[1], state[0])
        thdot = state[2]
        u = float(np.clip(np.asarray(action).ravel()[0], -self.max_torque, self.max_torque))
        reward = -(theta**2 + 0.1 * thdot**2 + 0.001 * u**2)
        accel = (
            3.0 * self.gravity / (2.0 * self.length) * np.sin(theta)
            + 3.0 / (self.mass * self.length**2) * u
        )
        thdot = np.clip(thdot + accel * self.dt, -self.max_speed, self.max_speed)
        theta = theta + thdot * self.dt
        next_state = np.array([np.cos(theta), np.sin(theta), thdot])
        return StepResult(
            next_state=next_state,
            reward=float(reward),
            true_terminal=False,
            timeout=step_index + 1 >= self.spec.max_episode_steps,
        )


class PointMass:
    """2-D double integrator steering toward the origin.

    State is (px, py, vx, vy); the action is an acceleration in [-1, 1]^2
    applied for dt = 0.1 (velocity first, then position; both clipped to
    +-2). Reward is -(|p|^2 + 0.01 |u|^2), bounded below by -(8 + 0.02).
    Episodes start at a uniformly random position with zero velocity.
    """

    dt = 0.1
    pos_limit = 2.0
    vel_limit = 2.0

    def __init__(self, max_episode_steps: int = 100):
        self.spec = EnvSpec(
            name="pointmass",
            obs_dim=4,
            action_dim=2,
            action_low=np.array([-1.0, -1.0]),
            action_high=np.array([1.0, 1.0]),
            max_episode_steps=max_episode_steps,
            reward_floor=-(2.0 * self.pos_limit**2 + 0.01 * 2.0),
        )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.0, 1.0, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def step(self, state: np.ndarray, action: np.ndarray, step_index: int = 0) -> StepResult:
        if not np.all(np.isfinite(state)):
            raise RuntimeError("point-mass state is not finite")
        pos, vel = state[:2], state[2:]
        u = np.clip(np.asarray(action, dtype=float).ravel(), -1.0, 1.0)
        reward = -(float(pos @ pos) + 0.01 * float(u @ u))
        vel = np.clip(vel + u * self.dt, -self.vel_limit, self.vel_limit)
        pos = np.clip(pos + vel * self.dt, -self.pos_limit, self.pos_limit)
        return StepResult(
            next_state=np.concatenate([pos, vel]),
            reward=reward,
            true_terminal=False,
            timeout=step_index + 1 >= self.spec.max_episode_steps,
        )


ENV_REGISTRY = {"pendulum": Pendulum, "pointmass": PointMass}


def make_env(env_id: str, **kwargs):
    """Instantiate a registered environment by id string."""
    try:
        return ENV_REGISTRY[env_id](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choices: {sorted(ENV_REGISTRY)}") from None
