"""TD3, Composite TD3 and TD3(Delta) built on :mod:`compositeq.deep.nets`."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from compositeq.deep import nets
from compositeq.deep.optim import make_optimizer, polyak_update
from compositeq.deep.targets import (
    Batch,
    CompositeTargets,
    composite_targets_from_heads,
    entropy_grad,
    entropy_of_predictions,
    gamma_schedule,
    td3_targets_from_q,
    td_delta_targets_from_heads,
)

AGENT_KINDS = ("td3", "composite_td3", "td3_delta")


class NumericalDivergence(RuntimeError):
    pass


@dataclass
class Td3Config:
    exploration_sigma: float = 0.15
    target_noise_sigma: float = 0.2
    target_noise_clip: float = 0.5
    policy_delay: int = 2
    tau: float = 5e-3
    gamma: float = 0.99
    alpha_q: float = 1e-3
    alpha_tr: float = 6e-5
    alpha_sh: float = 5e-3
    alpha_actor: float = 1e-3
    beta_tr: float = 0.002
    beta_sh: float = 0.001
    n: int = 4
    delta_heads: int = 8
    gamma_cap: float = 0.99
    twin_critics: bool = True
    variance_floor: float = 1e-6
    batch_size: int = 100
    critic_hidden: int = 500
    plain_critic_layers: int = 2
    actor_hidden: tuple[int, ...] = (400, 300)
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if min(self.exploration_sigma, self.target_noise_sigma, self.target_noise_clip) < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.n < 1 or self.delta_heads < 1 or self.policy_delay < 1:
            raise ValueError("n, delta_heads and policy_delay must be >= 1")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        self.actor_hidden = tuple(self.actor_hidden)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def gammas(self) -> list[float]:
        return gamma_schedule(self.delta_heads, self.gamma_cap)

    def rates(self) -> dict[str, float]:
        return {"trunk": self.alpha_q, "q_head": self.alpha_q, "trunc_heads": self.alpha_tr,
                "shift_heads": self.alpha_sh, "actor": self.alpha_actor}


# -- targets ---------------------------------------------------------------


def target_action(target_actor: nets.Net, s2: np.ndarray, cfg: Td3Config,
                  rng: np.random.Generator | None, bound: float = 1.0) -> np.ndarray:
    """Target-policy action with clipped Gaussian smoothing (skipped when ``rng`` is None)."""
    a = target_actor.forward(s2)["action"]
    if rng is not None and cfg.target_noise_sigma > 0:
        noise = rng.normal(0.0, cfg.target_noise_sigma, a.shape)
        a = a + np.clip(noise, -cfg.target_noise_clip, cfg.target_noise_clip)
    return np.clip(a, -bound, bound)


def _twin_min(values: list[np.ndarray]) -> np.ndarray:
    out = values[0]
    for v in values[1:]:
        out = np.minimum(out, v)
    return out


def composite_targets(batch: Batch, target_critics: list[nets.Net], target_actor: nets.Net,
                      cfg: Td3Config, rng: np.random.Generator | None = None) -> CompositeTargets:
    """Composite targets; with twin critics every bootstrap head is the per-head minimum."""
    a2 = target_action(target_actor, batch.s2, cfg, rng)
    outs = [nets.forward(c, batch.s2, a2) for c in target_critics]
    trunc = _twin_min([o["trunc"] for o in outs])
    shift = _twin_min([o["shift"] for o in outs])
    q = _twin_min([o["q"][:, 0] for o in outs])
    return composite_targets_from_heads(batch.r, batch.done, cfg.gamma, trunc, shift, q)


def td3_targets(batch: Batch, target_critics: list[nets.Net], target_actor: nets.Net,
                cfg: Td3Config, rng: np.random.Generator | None = None) -> np.ndarray:
    a2 = target_action(target_actor, batch.s2, cfg, rng)
    q = _twin_min([nets.forward(c, batch.s2, a2)["q"][:, 0] for c in target_critics])
    return td3_targets_from_q(batch.r, batch.done, cfg.gamma, q)


def td_delta_targets(batch: Batch, target_critics: list[nets.Net], target_actor: nets.Net,
                     cfg: Td3Config, rng: np.random.Generator | None = None,
                     gammas=None) -> np.ndarray:
    gammas = cfg.gammas() if gammas is None else gammas
    a2 = target_action(target_actor, batch.s2, cfg, rng)
    ws = [nets.forward(c, batch.s2, a2)["w"] for c in target_critics]
    w = _twin_min(ws)
    q_prev = _twin_min([np.cumsum(x, axis=1) for x in ws])
    return td_delta_targets_from_heads(batch.r, batch.done, gammas, w, q_prev)


# -- critic losses and steps -------------------------------------------------


def composite_loss_and_grad(critic: nets.Net, batch: Batch, targets: CompositeTargets,
                            cfg: Td3Config):
    """Squared error summed over all heads and averaged over the batch, plus
    the entropy regularizer on the two head layers.

    Returns ``(mse, mean_entropy, grad, outputs)``. The trunc-head layer
    descends on ``mse + beta_tr * H`` and the shift-head layer on
    ``mse - beta_sh * H``; every other layer sees only ``mse``.
    """
    out = nets.forward(critic, batch.s, batch.a)
    m = len(batch)
    e_tr = out["trunc"] - targets.trunc
    e_sh = out["shift"] - targets.shift
    e_q = out["q"] - targets.q[:, None]
    mse = float((np.sum(e_tr**2) + np.sum(e_sh**2) + np.sum(e_q**2)) / m)
    grad, _ = critic.backward({"trunc": 2 * e_tr / m, "shift": 2 * e_sh / m, "q": 2 * e_q / m})
    h = entropy_of_predictions(out["trunc"], out["shift"], cfg.variance_floor)
    dh = entropy_grad(out["trunc"], out["shift"], cfg.variance_floor) / m
    if cfg.beta_tr:
        grad += cfg.beta_tr * critic.layer_grad("trunc", dh)
    if cfg.beta_sh:
        grad -= cfg.beta_sh * critic.layer_grad("shift", dh)
    return mse, float(np.mean(h)), grad, out


def plain_loss_and_grad(critic: nets.Net, batch: Batch, targets: np.ndarray, output: str):
    out = nets.forward(critic, batch.s, batch.a)
    y = targets if targets.ndim == 2 else targets[:, None]
    err = out[output] - y
    m = len(batch)
    mse = float(np.sum(err**2) / m)
    grad, _ = critic.backward({output: 2 * err / m})
    return mse, grad, out


def critic_step(critic: nets.Net, opt, batch: Batch, targets, cfg: Td3Config,
                step: int = 0) -> dict[str, float]:
    """One optimizer step on a critic; dispatches on the target type."""
    if isinstance(targets, CompositeTargets):
        mse, h, grad, out = composite_loss_and_grad(critic, batch, targets, cfg)
        info = {"critic_loss": mse, "entropy": h}
        for i in range(cfg.n):
            info[f"td_err_trunc_{i + 1}"] = float(np.mean(np.abs(out["trunc"][:, i] - targets.trunc[:, i])))
            info[f"td_err_shift_{i + 1}"] = float(np.mean(np.abs(out["shift"][:, i] - targets.shift[:, i])))
        max_target = float(max(np.max(np.abs(targets.trunc)), np.max(np.abs(targets.shift)),
                               np.max(np.abs(targets.q))))
    else:
        output = "w" if targets.ndim == 2 else "q"
        mse, grad, _ = plain_loss_and_grad(critic, batch, targets, output)
        info = {"critic_loss": mse}
        max_target = float(np.max(np.abs(targets)))
    if not np.isfinite(mse) or not np.all(np.isfinite(grad)):
        raise NumericalDivergence(
            f"non-finite critic loss at step {step} (max |target| = {max_target:.3e})")
    opt.step(grad)
    return info


# -- actor ---------------------------------------------------------------------


CriticFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def net_critic_fn(critic: nets.Net, output: str = "q") -> CriticFn:
    """``(s, a) -> (value (B,), dvalue/da (B, action_dim))`` for a network critic.

    For a multi-head output the value is the sum of the heads, which is how a
    TD(Delta) critic recovers its largest-discount action-value.
    """

    def fn(s, a):
        out = nets.forward(critic, s, a)[output]
        _, dx = critic.backward({output: np.ones_like(out)})
        return out.sum(axis=1), dx[:, s.shape[1]:]

    return fn


def actor_gradient(actor: nets.Net, critic_fn: CriticFn, s: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean critic value at ``(s, actor(s))`` and its gradient w.r.t. actor parameters."""
    a = actor.forward(s)["action"]
    q, dq_da = critic_fn(s, a)
    grad, _ = actor.backward({"action": dq_da / len(s)})
    return float(np.mean(q)), grad


def actor_step(actor: nets.Net, opt, critic_fn: CriticFn, s: np.ndarray) -> float:
    """Gradient ascent on the mean critic value; returns the pre-step objective."""
    obj, grad = actor_gradient(actor, critic_fn, s)
    opt.step(-grad)
    return obj


# -- agents ----------------------------------------------------------------------


@dataclass
class Agent:
    kind: str
    state_dim: int
    action_dim: int
    cfg: Td3Config
    actor: nets.Net = field(init=False)
    critics: list[nets.Net] = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent {self.kind!r}")

    def build(self, rng: np.random.Generator) -> "Agent":
        cfg = self.cfg
        S, A = self.state_dim, self.action_dim
        self.actor = nets.actor_net(S, A, cfg.actor_hidden, 1.0, rng)
        count = 2 if cfg.twin_critics else 1
        if self.kind == "composite_td3":
            self.critics = [nets.composite_critic(S, A, cfg.n, cfg.critic_hidden, rng)
                            for _ in range(count)]
            self.head = "q"
        elif self.kind == "td3":
            hidden = (cfg.critic_hidden,) * cfg.plain_critic_layers
            self.critics = [nets.plain_critic(S, A, hidden, 1, rng) for _ in range(count)]
            self.head = "q"
        else:
            hidden = (cfg.critic_hidden,) * cfg.plain_critic_layers
            self.critics = [nets.plain_critic(S, A, hidden, cfg.delta_heads, rng, "w")
                            for _ in range(count)]
            self.head = "w"
        self.actor_target = self.actor.clone()
        self.critic_targets = [c.clone() for c in self.critics]
        rates = cfg.rates()
        self.actor_opt = make_optimizer(cfg.optimizer, self.actor.params, rates)
        self.critic_opts = [make_optimizer(cfg.optimizer, c.params, rates) for c in self.critics]
        self.updates = 0
        return self

    def act(self, s: np.ndarray) -> np.ndarray:
        return self.actor.forward(np.atleast_2d(s))["action"][0]

    def targets(self, batch: Batch, rng: np.random.Generator | None):
        if self.kind == "composite_td3":
            return composite_targets(batch, self.critic_targets, self.actor_target, self.cfg, rng)
        if self.kind == "td3":
            return td3_targets(batch, self.critic_targets, self.actor_target, self.cfg, rng)
        return td_delta_targets(batch, self.critic_targets, self.actor_target, self.cfg, rng)

    def update(self, batch: Batch, rng: np.random.Generator) -> dict[str, float]:
        y = self.targets(batch, rng)
        info = {}
        for critic, opt in zip(self.critics, self.critic_opts):
            info = critic_step(critic, opt, batch, y, self.cfg, self.updates)
        self.updates += 1
        if self.updates % self.cfg.policy_delay == 0:
            actor_step(self.actor, self.actor_opt, net_critic_fn(self.critics[0], self.head), batch.s)
            polyak_update(self.actor_target.params, self.actor.params, self.cfg.tau)
            for tgt, c in zip(self.critic_targets, self.critics):
                polyak_update(tgt.params, c.params, self.cfg.tau)
        return info


class ContinuousReplay:
    """Fixed-capacity ring buffer of float transitions with uniform sampling."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000):
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.capacity = capacity
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, m: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=m)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])
