"""Actor-critic training loop on :class:`PointReachEnv`."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from compositeq.deep.agents import Agent, ContinuousReplay, Td3Config
from compositeq.deep.env import PointReachEnv, noisy_reward, scripted_return
from compositeq.runs import auc

ORACLE_EPISODES = 1000
ORACLE_SEED = 12345


@dataclass
class DeepRunConfig:
    agent: str = "composite_td3"
    total_steps: int = 50_000
    start_steps: int = 1_000
    grad_steps: int = 1
    eval_every: int = 2_500
    eval_episodes: int = 10
    reward_noise: float = 0.0
    buffer_size: int = 1_000_000
    # Shifted-head rate used instead of alpha_sh when grad_steps > 1 (None keeps alpha_sh).
    alpha_sh_multistep: float | None = None
    # Stop after the first evaluation whose return reaches this value.
    stop_return: float | None = None
    td3: Td3Config = field(default_factory=Td3Config)

    def __post_init__(self) -> None:
        if self.total_steps < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("total_steps, eval_every and eval_episodes must be >= 1")
        if self.grad_steps < 1:
            raise ValueError("grad_steps must be >= 1")
        if not 0.0 <= self.reward_noise <= 1.0:
            raise ValueError("reward_noise must lie in [0, 1]")

    def effective_td3(self) -> Td3Config:
        if self.grad_steps > 1 and self.alpha_sh_multistep is not None:
            return dataclasses.replace(self.td3, alpha_sh=self.alpha_sh_multistep)
        return self.td3


@dataclass
class DeepResult:
    eval_steps: np.ndarray
    eval_returns: np.ndarray
    rows: list[tuple[int, str, float]]
    agent: Agent

    @property
    def auc(self) -> float:
        return auc(self.eval_steps, self.eval_returns)

    @property
    def best_return(self) -> float:
        return float(np.max(self.eval_returns))


def oracle_return(episodes: int = ORACLE_EPISODES, seed: int = ORACLE_SEED) -> float:
    """Mean return of the scripted reach-the-origin policy (the desk-scale baseline)."""
    return scripted_return(episodes, np.random.Generator(np.random.PCG64(seed)))


def evaluate(agent: Agent, starts: np.ndarray) -> float:
    """Noise-free rollouts from fixed start positions; mean undiscounted true return."""
    env = PointReachEnv()
    total = 0.0
    for p in starts:
        s = env.reset(pos=p)
        done = False
        while not done:
            s, r, done = env.step(agent.act(s))
            total += r
    return total / len(starts)


def run_deep(cfg: DeepRunConfig, seed: int,
             on_eval: Callable[[list[tuple[int, str, float]]], None] | None = None) -> DeepResult:
    """Interleave environment steps and gradient steps, evaluating every ``eval_every`` steps.

    Separate generators drive initialisation, exploration and start states,
    minibatch sampling and target smoothing, reward noise, and evaluation
    start states, so changing e.g. ``reward_noise`` leaves the other streams
    untouched. ``on_eval`` receives each checkpoint's rows as they are made.
    """
    init_rng, act_rng, learn_rng, noise_rng, eval_rng = (
        np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(5))
    env = PointReachEnv()
    agent = Agent(cfg.agent, env.state_dim, env.action_dim, cfg.effective_td3()).build(init_rng)
    td3 = agent.cfg
    replay = ContinuousReplay(env.state_dim, env.action_dim, min(cfg.buffer_size, cfg.total_steps))
    starts = eval_rng.uniform(-1.0, 1.0, (cfg.eval_episodes, env.state_dim))

    rows: list[tuple[int, str, float]] = []
    eval_steps, eval_returns = [], []
    sums: dict[str, float] = {}
    count = 0

    def checkpoint(step: int) -> None:
        nonlocal sums, count
        ret = evaluate(agent, starts)
        eval_steps.append(step)
        eval_returns.append(ret)
        new = [(step, "eval_return", ret)]
        new += [(step, k, v / count) for k, v in sorted(sums.items())] if count else []
        rows.extend(new)
        if on_eval is not None:
            on_eval(new)
        sums, count = {}, 0

    checkpoint(0)
    s = env.reset(act_rng)
    for t in range(1, cfg.total_steps + 1):
        if t <= cfg.start_steps:
            a = act_rng.uniform(-1.0, 1.0, env.action_dim)
        else:
            a = agent.act(s) + act_rng.normal(0.0, td3.exploration_sigma, env.action_dim)
            a = np.clip(a, -env.action_bound, env.action_bound)
        s2, r, done = env.step(a)
        if cfg.reward_noise > 0:
            r = noisy_reward(r, cfg.reward_noise, noise_rng)
        # The episode end is a time limit, never a true terminal.
        replay.add(s, a, r, s2, False)
        s = env.reset(act_rng) if done else s2
        if len(replay) >= td3.batch_size:
            for _ in range(cfg.grad_steps):
                info = agent.update(replay.sample(td3.batch_size, learn_rng), learn_rng)
                for k, v in info.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
        if t % cfg.eval_every == 0:
            checkpoint(t)
            if cfg.stop_return is not None and eval_returns[-1] >= cfg.stop_return:
                break
    return DeepResult(np.array(eval_steps), np.array(eval_returns), rows, agent)


def save_checkpoint(agent: Agent, directory: str | Path, tag: str) -> list[Path]:
    """Write actor and critic parameters in the text checkpoint format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / f"{tag}_actor.params"]
    agent.actor.params.save(paths[0])
    for i, c in enumerate(agent.critics):
        paths.append(directory / f"{tag}_critic{i}.params")
        c.params.save(paths[-1])
    return paths
