"""Optimizers with per-group step sizes, and Polyak averaging."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from compositeq.deep.nets import ParamVector


def group_rates(params: ParamVector, rates: Mapping[str, float]) -> np.ndarray:
    """Per-entry step sizes from a ``{group: rate}`` map."""
    lr = np.zeros(len(params))
    for g in params.groups():
        if g not in rates:
            raise KeyError(f"no learning rate for parameter group {g!r}")
        lr[params.group_mask(g)] = rates[g]
    return lr


class Adam:
    """Adam whose step size is a per-parameter vector.

    Each group's rate is that group's own Adam step size. Because Adam
    normalizes gradient magnitude, scaling a gradient by a rate before the
    moment update would cancel out; the rate must act on the step.
    """

    def __init__(self, params: ParamVector, rates: Mapping[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = group_rates(params, rates)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(len(params))
        self.v = np.zeros(len(params))
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        """Descend along ``grad``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        self.params.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    """Plain gradient descent with per-group rates: ``theta -= rate * grad``."""

    def __init__(self, params: ParamVector, rates: Mapping[str, float]):
        self.params = params
        self.lr = group_rates(params, rates)

    def step(self, grad: np.ndarray) -> None:
        self.params.values -= self.lr * grad


def make_optimizer(kind: str, params: ParamVector, rates: Mapping[str, float]):
    if kind == "adam":
        return Adam(params, rates)
    if kind == "sgd":
        return Sgd(params, rates)
    raise ValueError(f"unknown optimizer {kind!r}")


def polyak_update(target: ParamVector, online: ParamVector, tau: float) -> ParamVector:
    """``target <- (1 - tau) * target + tau * online``, in place."""
    if not target.same_layout(online):
        raise ValueError("parameter layouts differ")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 1.0:
        target.values[...] = online.values
    elif tau > 0.0:
        # Difference form: exact no-op when target already equals online.
        target.values += tau * (online.values - target.values)
    return target
