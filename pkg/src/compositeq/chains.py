"""The deterministic and stochastic chain benchmarks, plus fixed-batch generation."""
from __future__ import annotations

import numpy as np

from compositeq.mdp import Branch, ReplayBuffer, RewardDist, TabularMdp, Transition, _pick

ACTION_A, ACTION_B, ACTION_C = 0, 1, 2
ACTION_NAMES = ("a", "b", "c")


class ChainConfigError(ValueError):
    pass


def _det(next_state: int, reward: float) -> tuple[Branch, ...]:
    return (Branch(1.0, next_state, RewardDist.constant(reward)),)


def make_deterministic_chain(K: int, gamma: float = 1.0) -> TabularMdp:
    """Chain of horizon ``K`` with actions a (forward), b (back), c (skip two).

    ``s_{K-2}`` is the bad terminal and ``s_{K-1}`` the goal. The optimal path
    takes a up to ``s_{K-3}`` and then c into the goal.
    """
    if K < 6:
        raise ChainConfigError(f"deterministic chain needs K >= 6, got {K}")
    bad, goal = K - 2, K - 1
    outcomes = {}
    for i in range(K - 2):
        if i <= K - 4:
            outcomes[(i, ACTION_A)] = _det(i + 1, -1.0)
        else:
            outcomes[(i, ACTION_A)] = _det(bad, -100.0)
        outcomes[(i, ACTION_B)] = _det(max(i - 1, 0), -2.0)
        if i <= K - 5:
            outcomes[(i, ACTION_C)] = _det(i + 2, -3.0)
        elif i == K - 4:
            outcomes[(i, ACTION_C)] = _det(bad, -30.0)
        else:
            outcomes[(i, ACTION_C)] = _det(goal, -3.0)
    return TabularMdp(K, 3, outcomes, frozenset({bad, goal}), 0, gamma)


def make_stochastic_chain(K: int, gamma: float = 1.0) -> TabularMdp:
    """Chain of horizon ``K`` where both actions advance one state.

    a pays -1 w.p. 0.8 and 0 w.p. 0.2 (mean -0.8); b pays +1 w.p. 0.99 and
    -200 w.p. 0.01 (mean -1.01).
    """
    if K < 2:
        raise ChainConfigError(f"stochastic chain needs K >= 2, got {K}")
    reward_a = RewardDist(((0.8, -1.0), (0.2, 0.0)))
    reward_b = RewardDist(((0.99, 1.0), (0.01, -200.0)))
    outcomes = {}
    for i in range(K - 1):
        outcomes[(i, ACTION_A)] = (Branch(1.0, i + 1, reward_a),)
        outcomes[(i, ACTION_B)] = (Branch(1.0, i + 1, reward_b),)
    return TabularMdp(K, 2, outcomes, frozenset({K - 1}), 0, gamma)


def make_probe(gamma: float = 1.0) -> TabularMdp:
    """Two states, one action: ``s0`` pays 1 and ends in terminal ``s1``."""
    return TabularMdp(2, 1, {(0, 0): _det(1, 1.0)}, frozenset({1}), 0, gamma)


def make_chain(variant: str, K: int, gamma: float = 1.0) -> TabularMdp:
    """``variant`` is deterministic, stochastic or probe (``K`` ignored for probe)."""
    if variant == "probe":
        return make_probe(gamma)
    if variant == "deterministic":
        return make_deterministic_chain(K, gamma)
    if variant == "stochastic":
        return make_stochastic_chain(K, gamma)
    raise ChainConfigError(f"unknown chain variant {variant!r}")


def behavior_action(optimal_action: int, num_actions: int, nonoptimal_frac: float,
                    u_coin: float, u_pick: float) -> int:
    """Mixing behavior: a uniform non-optimal action w.p. ``nonoptimal_frac``.

    Falls back to the optimal action when it is the only one.
    """
    if num_actions > 1 and u_coin < nonoptimal_frac:
        k = min(int(u_pick * (num_actions - 1)), num_actions - 2)
        return k if k < optimal_action else k + 1
    return optimal_action


def generate_batch(
    mdp: TabularMdp,
    episodes: int,
    nonoptimal_frac: float,
    optimal: np.ndarray,
    rng: np.random.Generator,
    max_steps: int | None = None,
) -> ReplayBuffer:
    """Fixed batch of behavior-policy episodes, each from the initial state.

    Every step consumes four uniform doubles in this order: non-optimal coin,
    non-optimal action pick, outcome branch, reward atom. Episodes are capped
    at ``10 * num_states`` steps unless ``max_steps`` says otherwise.
    """
    if episodes < 1:
        raise ChainConfigError("episodes must be >= 1")
    if not 0.0 <= nonoptimal_frac <= 1.0:
        raise ChainConfigError("nonoptimal_frac must lie in [0, 1]")
    cap = 10 * mdp.num_states if max_steps is None else max_steps
    buf = ReplayBuffer()
    A = mdp.num_actions
    for _ in range(episodes):
        buf.start_episode()
        s = mdp.initial_state
        for _ in range(cap):
            u = rng.random(4)
            a = behavior_action(int(optimal[s]), A, nonoptimal_frac, u[0], u[1])
            branches = mdp.branches(s, a)
            b = branches[_pick(np.cumsum([x.prob for x in branches]), u[2])]
            _, r = b.reward.atoms[_pick(b.reward.cumulative(), u[3])]
            done = b.next_state in mdp.terminal
            buf.add(Transition(s, a, r, b.next_state, done))
            s = b.next_state
            if done:
                break
    return buf
