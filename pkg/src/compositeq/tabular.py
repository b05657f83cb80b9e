"""Sample-based tabular learners.

Every update reads all of its targets from the pre-step tables and only then
writes, so the order of writes within a step never matters. Greedy actions
break ties toward the lowest index. Bootstraps through terminal transitions
are zero, which keeps terminal rows at exactly zero forever.

The step functions here update tables in place and also return them. The
compiled loops in :mod:`compositeq._kernels` implement the same arithmetic
for long training runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from compositeq import oracle
from compositeq.mdp import TabularMdp, Transition, sample_step

LEARNER_KINDS = ("vanilla", "composite", "shifted", "nstep_onpolicy", "nstep_model", "td_delta")


@dataclass
class QTables:
    """Composite learner state: full Q plus ``n`` truncated and ``n`` shifted tables.

    ``trunc[i - 1]`` holds horizon ``i``; ``shift[i - 1]`` holds shift ``i``.
    """

    q: np.ndarray
    trunc: np.ndarray
    shift: np.ndarray

    def __post_init__(self) -> None:
        if self.trunc.shape != self.shift.shape or self.trunc.shape[1:] != self.q.shape:
            raise ValueError("table shapes disagree")
        if self.trunc.shape[0] < 1:
            raise ValueError("need n >= 1")

    @property
    def n(self) -> int:
        return self.trunc.shape[0]

    @classmethod
    def zeros(cls, num_states: int, num_actions: int, n: int) -> "QTables":
        return cls(
            np.zeros((num_states, num_actions)),
            np.zeros((n, num_states, num_actions)),
            np.zeros((n, num_states, num_actions)),
        )

    @classmethod
    def from_oracle(cls, mdp: TabularMdp, n: int, tol: float = oracle.DEFAULT_TOL) -> "QTables":
        q_star = oracle.value_iteration(mdp, tol)
        pi = oracle.greedy_policy(q_star)
        return cls(
            q_star,
            np.stack(oracle.truncated_oracle(mdp, pi, n)),
            np.stack(oracle.shifted_oracle(mdp, pi, q_star, n)),
        )

    def copy(self) -> "QTables":
        return QTables(self.q.copy(), self.trunc.copy(), self.shift.copy())


@dataclass
class DeltaTables:
    """Delta functions ``W_1..W_k`` for increasing discounts ``gammas``.

    ``Q_{gamma_i}`` is the prefix sum of ``heads[:i]``.
    """

    heads: np.ndarray
    gammas: np.ndarray

    def __post_init__(self) -> None:
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        if self.heads.shape[0] != len(self.gammas):
            raise ValueError("one head per discount required")
        if np.any(np.diff(self.gammas) <= 0):
            raise ValueError("gammas must be strictly increasing")
        if self.gammas[0] < 0 or self.gammas[-1] >= 1:
            raise ValueError("gammas must lie in [0, 1)")

    @classmethod
    def zeros(cls, num_states: int, num_actions: int, gammas: Sequence[float]) -> "DeltaTables":
        return cls(np.zeros((len(gammas), num_states, num_actions)), np.asarray(gammas, float))

    def q(self, i: int | None = None) -> np.ndarray:
        """``Q_{gamma_i}`` (1-based ``i``); the largest discount by default."""
        k = len(self.gammas) if i is None else i
        return self.heads[:k].sum(axis=0)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"learning rate {alpha} outside (0, 1]")


def vanilla_step(q: np.ndarray, t: Transition, alpha: float, gamma: float) -> np.ndarray:
    _check_alpha(alpha)
    boot = 0.0 if t.done else gamma * q[t.s_next].max()
    q[t.s, t.a] = (1 - alpha) * q[t.s, t.a] + alpha * (t.r + boot)
    return q


def composite_targets(tables: QTables, t: Transition, gamma: float):
    """Targets ``(trunc[n], shift[n], q)`` for one transition, read from the current tables."""
    n = tables.n
    y_tr = np.full(n, t.r)
    y_sh = np.zeros(n)
    if t.done:
        return y_tr, y_sh, t.r
    s2 = t.s_next
    a_star = int(np.argmax(tables.q[s2]))
    y_tr[1:] += gamma * tables.trunc[:-1, s2, a_star]
    y_sh[0] = gamma * tables.q[s2, a_star]
    y_sh[1:] = gamma * tables.shift[:-1, s2, a_star]
    y_q = t.r + gamma * (tables.trunc[-1, s2, a_star] + tables.shift[-1, s2, a_star])
    return y_tr, y_sh, y_q


def composite_step(tables: QTables, t: Transition, alphas: tuple[float, float, float],
                   gamma: float) -> QTables:
    """One Composite Q-learning update with rates ``(alpha_q, alpha_tr, alpha_sh)``."""
    alpha_q, alpha_tr, alpha_sh = alphas
    for al in alphas:
        _check_alpha(al)
    y_tr, y_sh, y_q = composite_targets(tables, t, gamma)
    s, a = t.s, t.a
    tables.trunc[:, s, a] = (1 - alpha_tr) * tables.trunc[:, s, a] + alpha_tr * y_tr
    tables.shift[:, s, a] = (1 - alpha_sh) * tables.shift[:, s, a] + alpha_sh * y_sh
    tables.q[s, a] = (1 - alpha_q) * tables.q[s, a] + alpha_q * y_q
    return tables


def shifted_only_step(q: np.ndarray, shift1: np.ndarray, t: Transition,
                      alphas: tuple[float, float], gamma: float):
    """Q-learning with a one-step shifted target; ``alphas = (alpha_q, alpha_sh)``.

    ``shift1(s, a)`` tracks ``gamma * max Q(s', .)`` and the full-Q target is
    ``r + shift1(s, a)`` (pre-step value), so the discounted bootstrap reaches
    Q only through the shifted table. Terminal transitions target ``r``.
    """
    alpha_q, alpha_sh = alphas
    _check_alpha(alpha_q)
    _check_alpha(alpha_sh)
    if t.done:
        y_sh, y_q = 0.0, t.r
    else:
        y_sh = gamma * q[t.s_next].max()
        y_q = t.r + shift1[t.s, t.a]
    shift1[t.s, t.a] = (1 - alpha_sh) * shift1[t.s, t.a] + alpha_sh * y_sh
    q[t.s, t.a] = (1 - alpha_q) * q[t.s, t.a] + alpha_q * y_q
    return q, shift1


def nstep_onpolicy_step(q: np.ndarray, window: Sequence[Transition], alpha: float,
                        gamma: float) -> np.ndarray:
    """Uncorrected n-step update of ``Q(s_0, a_0)`` from a same-episode window."""
    _check_alpha(alpha)
    if not window:
        raise ValueError("empty window")
    for prev, nxt in zip(window, window[1:]):
        if prev.done or prev.s_next != nxt.s:
            raise ValueError("window crosses an episode boundary")
    target = sum(gamma**j * t.r for j, t in enumerate(window))
    last = window[-1]
    if not last.done:
        target += gamma ** len(window) * q[last.s_next].max()
    first = window[0]
    q[first.s, first.a] = (1 - alpha) * q[first.s, first.a] + alpha * target
    return q


def nstep_model_step(q: np.ndarray, t: Transition, mdp: TabularMdp, n: int, alpha: float,
                     rng: np.random.Generator) -> np.ndarray:
    """n-step update whose tail is an imagined greedy rollout in the true model."""
    _check_alpha(alpha)
    gamma = mdp.gamma
    target, disc = t.r, gamma
    s, done = t.s_next, t.done
    for _ in range(n - 1):
        if done:
            break
        step = sample_step(mdp, s, int(np.argmax(q[s])), rng)
        target += disc * step.r
        disc *= gamma
        s, done = step.s_next, step.done
    if not done:
        target += disc * q[s].max()
    q[t.s, t.a] = (1 - alpha) * q[t.s, t.a] + alpha * target
    return q


def td_delta_targets(tables: DeltaTables, t: Transition) -> np.ndarray:
    g = tables.gammas
    k = len(g)
    if t.done:
        y = np.zeros(k)
        y[0] = t.r
        return y
    w_next = tables.heads[:, t.s_next, :]
    prefix = np.cumsum(w_next, axis=0)
    a_star = int(np.argmax(prefix[-1]))
    y = np.empty(k)
    y[0] = t.r + g[0] * prefix[0, a_star]
    for i in range(1, k):
        y[i] = (g[i] - g[i - 1]) * prefix[i - 1, a_star] + g[i] * w_next[i, a_star]
    return y


def td_delta_step(tables: DeltaTables, t: Transition, alpha: float) -> DeltaTables:
    _check_alpha(alpha)
    y = td_delta_targets(tables, t)
    tables.heads[:, t.s, t.a] = (1 - alpha) * tables.heads[:, t.s, t.a] + alpha * y
    return tables


def epsilon_greedy(q: np.ndarray, s: int, eps: float, rng: np.random.Generator) -> int:
    """Uniform action w.p. ``eps`` (two draws per call: coin, then pick), else greedy."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    coin, pick = rng.random(2)
    A = q.shape[1]
    if coin < eps:
        return min(int(pick * A), A - 1)
    return int(np.argmax(q[s]))


def gamma_schedule(k: int, cap: float = 0.99) -> list[float]:
    """Discounts ``0, 1/2, 3/4, ...`` (each halfway to 1), capped at ``cap``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gammas = [0.0]
    for _ in range(1, k):
        gammas.append(min((gammas[-1] + 1.0) / 2.0, cap))
    return gammas
