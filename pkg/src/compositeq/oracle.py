"""Exact dynamic-programming ground truth on tabular MDPs.

Q-tables are dense ``(num_states, num_actions)`` float arrays. Terminal rows
are zero, and every bootstrap through a terminal successor contributes zero.
Greedy choices break ties toward the lowest action index (``np.argmax``).
"""
from __future__ import annotations

import numpy as np

from compositeq.mdp import TabularMdp

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1_000_000


class DivergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def greedy_policy(q: np.ndarray) -> np.ndarray:
    return np.argmax(q, axis=1)


def _successor_value(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """``E[v(s') | s, a]`` as an ``(S, A)`` table; terminal successors count as zero."""
    v = np.where(_terminal_mask(mdp), 0.0, v)
    return (mdp.transition_matrix() @ v).reshape(mdp.num_states, mdp.num_actions)


def _terminal_mask(mdp: TabularMdp) -> np.ndarray:
    mask = np.zeros(mdp.num_states, dtype=bool)
    mask[list(mdp.terminal)] = True
    return mask


def _evaluate_at(table: np.ndarray, policy: np.ndarray) -> np.ndarray:
    return table[np.arange(table.shape[0]), policy]


def _fixed_point(mdp, backup, tol, max_iter, what):
    q = np.zeros((mdp.num_states, mdp.num_actions))
    residual = np.inf
    for _ in range(max_iter):
        q_new = backup(q)
        residual = float(np.max(np.abs(q_new - q))) if q.size else 0.0
        q = q_new
        if not np.isfinite(residual):
            break
        if residual < tol:
            return q
    raise DivergenceError(f"{what} did not converge within {max_iter} backups", residual)


def value_iteration(mdp: TabularMdp, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Optimal action-values by synchronous Bellman-optimality backups from zero."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = mdp.expected_reward_table()

    def backup(q):
        return R + mdp.gamma * _successor_value(mdp, q.max(axis=1))

    return _fixed_point(mdp, backup, tol, max_iter, "value iteration")


def policy_q_evaluation(mdp: TabularMdp, policy: np.ndarray, tol: float = DEFAULT_TOL,
                        max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Action-values of a fixed deterministic policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = mdp.expected_reward_table()
    policy = np.asarray(policy)

    def backup(q):
        return R + mdp.gamma * _successor_value(mdp, _evaluate_at(q, policy))

    return _fixed_point(mdp, backup, tol, max_iter, "policy evaluation")


def truncated_oracle(mdp: TabularMdp, policy: np.ndarray, n: int) -> list[np.ndarray]:
    """Tables ``i = 1..n`` (returned at list index ``i-1``) of the expected
    first-``i``-step discounted reward after ``(s, a)``, then following ``policy``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = np.asarray(policy)
    R = mdp.expected_reward_table()
    tables = [R.copy()]
    for _ in range(1, n):
        prev = tables[-1]
        tables.append(R + mdp.gamma * _successor_value(mdp, _evaluate_at(prev, policy)))
    return tables


def shifted_oracle(mdp: TabularMdp, policy: np.ndarray, q_full: np.ndarray,
                   n: int) -> list[np.ndarray]:
    """Tables ``i = 1..n`` of ``E[gamma^i q_full(s_{t+i}, policy(s_{t+i}))]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = np.asarray(policy)
    tables = [mdp.gamma * _successor_value(mdp, _evaluate_at(q_full, policy))]
    for _ in range(1, n):
        tables.append(mdp.gamma * _successor_value(mdp, _evaluate_at(tables[-1], policy)))
    return tables


def delta_oracle(mdp: TabularMdp, policy: np.ndarray, gammas, tol: float = DEFAULT_TOL):
    """Delta tables ``W_i = Q_{gamma_i} - Q_{gamma_{i-1}}`` of ``policy`` (``W_1 = Q_{gamma_1}``)."""
    qs = [policy_q_evaluation(mdp.with_gamma(g), policy, tol) for g in gammas]
    return [qs[0]] + [qs[i] - qs[i - 1] for i in range(1, len(qs))]


def optimal_policy(mdp: TabularMdp, tol: float = DEFAULT_TOL) -> np.ndarray:
    return greedy_policy(value_iteration(mdp, tol))
