"""A small continuous reaching task and the noisy-reward wrapper."""
from __future__ import annotations

import numpy as np

STEP_SIZE = 0.05
EPISODE_LENGTH = 100


class PointReachEnv:
    """Move a point in ``[-1, 1]^2`` toward the origin.

    Each step moves by ``0.05 * a`` (action clipped to the box), clips the
    position to the box and pays ``-||p'||``. Episodes last 100 steps and
    have no true terminal state, so learners must not zero bootstraps at the
    time limit.
    """

    state_dim = 2
    action_dim = 2
    action_bound = 1.0

    def __init__(self, episode_length: int = EPISODE_LENGTH):
        self.episode_length = episode_length
        self.pos = np.zeros(2)
        self.t = 0
        self.clip_warnings = 0

    def reset(self, rng: np.random.Generator | None = None, pos=None) -> np.ndarray:
        if pos is not None:
            self.pos = np.clip(np.asarray(pos, dtype=np.float64), -1.0, 1.0)
        else:
            self.pos = rng.uniform(-1.0, 1.0, 2)
        self.t = 0
        return self.pos.copy()

    def step(self, a) -> tuple[np.ndarray, float, bool]:
        a = np.asarray(a, dtype=np.float64)
        if np.any(np.abs(a) > self.action_bound):
            self.clip_warnings += 1
            a = np.clip(a, -self.action_bound, self.action_bound)
        self.pos = np.clip(self.pos + STEP_SIZE * a, -1.0, 1.0)
        self.t += 1
        r = -float(np.linalg.norm(self.pos))
        return self.pos.copy(), r, self.t >= self.episode_length


def env_step(env: PointReachEnv, a) -> tuple[np.ndarray, float, bool]:
    return env.step(a)


def scripted_action(pos: np.ndarray) -> np.ndarray:
    """Head straight for the origin at unit speed, landing exactly on it."""
    return -pos / max(float(np.linalg.norm(pos)), STEP_SIZE)


def scripted_return(episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of :func:`scripted_action` over seeded episodes."""
    env = PointReachEnv()
    total = 0.0
    for _ in range(episodes):
        s = env.reset(rng)
        done = False
        while not done:
            s, r, done = env.step(scripted_action(s))
            total += r
    return total / episodes


def noisy_reward(r: float, p: float, rng: np.random.Generator) -> float:
    """With probability ``p`` replace ``r`` by a fresh ``U[-1, 1]`` draw."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if rng.random() < p:
        return float(rng.uniform(-1.0, 1.0))
    return r
