"""Regression targets for composite, TD3 and TD3(Delta) critics, and the
prediction-spread entropy used to regularize composite heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from compositeq.tabular import gamma_schedule

__all__ = [
    "Batch",
    "CompositeTargets",
    "composite_targets_from_heads",
    "td3_targets_from_q",
    "td_delta_targets_from_heads",
    "entropy_of_predictions",
    "entropy_grad",
    "gamma_schedule",
]


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


@dataclass
class CompositeTargets:
    trunc: np.ndarray  # (B, n)
    shift: np.ndarray  # (B, n)
    q: np.ndarray  # (B,)


def composite_targets_from_heads(r, done, gamma: float, trunc_next, shift_next, q_next
                                 ) -> CompositeTargets:
    """Targets from target-network head values at ``(s', a')``.

    ``trunc_next`` and ``shift_next`` are ``(B, n)``; ``q_next`` is ``(B,)``.
    Every bootstrap term is zeroed where ``done``.
    """
    r = np.asarray(r, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    trunc_next = np.atleast_2d(trunc_next)
    shift_next = np.atleast_2d(shift_next)
    q_next = np.asarray(q_next, dtype=np.float64).reshape(-1)
    B, n = trunc_next.shape
    g = gamma * live[:, None]
    y_tr = np.repeat(r[:, None], n, axis=1)
    y_tr[:, 1:] += g * trunc_next[:, :-1]
    y_sh = np.empty((B, n))
    y_sh[:, 0] = gamma * live * q_next
    y_sh[:, 1:] = g * shift_next[:, :-1]
    y_q = r + gamma * live * (trunc_next[:, -1] + shift_next[:, -1])
    return CompositeTargets(y_tr, y_sh, y_q)


def td3_targets_from_q(r, done, gamma: float, q_next) -> np.ndarray:
    live = 1.0 - np.asarray(done, dtype=np.float64)
    return np.asarray(r, dtype=np.float64) + gamma * live * np.asarray(q_next).reshape(-1)


def td_delta_targets_from_heads(r, done, gammas, w_next, q_prev_next=None) -> np.ndarray:
    """TD(Delta) targets ``(B, k)`` from target delta heads ``W'_i(s', a')``.

    ``q_prev_next[:, i]`` is ``Q'_{gamma_i}(s', a')`` (the prefix sum of the
    first ``i + 1`` heads); it is derived from ``w_next`` when not supplied.
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    w_next = np.atleast_2d(w_next)
    if q_prev_next is None:
        q_prev_next = np.cumsum(w_next, axis=1)
    y = np.empty_like(w_next)
    y[:, 0] = r + gammas[0] * live * q_prev_next[:, 0]
    y[:, 1:] = live[:, None] * (
        (gammas[1:] - gammas[:-1]) * q_prev_next[:, :-1] + gammas[1:] * w_next[:, 1:]
    )
    return y


def _spread(trunc, shift, floor):
    c = np.atleast_2d(np.asarray(trunc) + np.asarray(shift))
    n = c.shape[1]
    if n < 2:
        return c, np.zeros(c.shape[0]), np.zeros(c.shape[0], dtype=bool)
    var = c.var(axis=1, ddof=1)
    return c, var, var > floor


def entropy_of_predictions(trunc, shift, floor: float = 1e-6):
    """Gaussian entropy ``0.5 * ln(2 pi e max(var, floor))`` of the ``n``
    complete estimates ``trunc_i + shift_i``.

    Sample variance (divisor ``n - 1``); ``n = 1`` falls to the floor.
    Accepts one sample (1-D inputs) or a batch ``(B, n)``.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    _, var, _ = _spread(trunc, shift, floor)
    h = 0.5 * np.log(2.0 * np.pi * np.e * np.maximum(var, floor))
    return float(h[0]) if np.ndim(trunc) == 1 else h


def entropy_grad(trunc, shift, floor: float = 1e-6) -> np.ndarray:
    """``dH / d(trunc_i + shift_i)`` per sample, shape ``(B, n)``; zero on the floor branch."""
    c, var, live = _spread(trunc, shift, floor)
    n = c.shape[1]
    if n < 2:
        return np.zeros_like(c)
    dvar = 2.0 * (c - c.mean(axis=1, keepdims=True)) / (n - 1)
    scale = np.where(live, 0.5 / np.where(live, var, 1.0), 0.0)
    return scale[:, None] * dvar
