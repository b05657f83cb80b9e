"""Central finite-difference checks shared by the deep unit and acceptance tests."""
import numpy as np

from compositeq.deep import nets
from compositeq.deep.agents import (
    Td3Config,
    actor_gradient,
    composite_loss_and_grad,
    net_critic_fn,
)
from compositeq.deep.targets import Batch, CompositeTargets, entropy_of_predictions

H = 1e-5
# Entries far below the gradient's own scale are dominated by finite-difference
# round-off (about eps * |loss| / h), so their denominator is floored at this
# fraction of the largest entry.
SCALE_FLOOR = 1e-3


def rel_err(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), SCALE_FLOOR * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_grad(fun, params: nets.ParamVector, mask=None, h=H) -> np.ndarray:
    out = np.zeros(len(params))
    idx = np.arange(len(params)) if mask is None else np.flatnonzero(mask)
    for i in idx:
        old = params.values[i]
        params.values[i] = old + h
        up = fun()
        params.values[i] = old - h
        down = fun()
        params.values[i] = old
        out[i] = (up - down) / (2 * h)
    return out


WEIGHT_SCALE = 0.6


def _randomize(net, rng):
    # Default init shrinks signals through five critic layers until gradients
    # sit at the round-off floor of the finite differences; O(1) weights keep
    # every path well conditioned without changing what is being checked.
    net.set_params(rng.normal(0.0, WEIGHT_SCALE, len(net.params)))
    return net


def random_instance(rng, n=3, hidden=5, batch=6, state_dim=2, action_dim=2):
    critic = _randomize(nets.composite_critic(state_dim, action_dim, n, hidden, rng), rng)
    b = Batch(rng.normal(size=(batch, state_dim)), rng.uniform(-1, 1, (batch, action_dim)),
              rng.normal(size=batch), rng.normal(size=(batch, state_dim)), np.zeros(batch))
    y = CompositeTargets(rng.normal(size=(batch, n)), rng.normal(size=(batch, n)), rng.normal(size=batch))
    cfg = Td3Config(n=n, beta_tr=float(rng.uniform(0.1, 1)), beta_sh=float(rng.uniform(0.1, 1)))
    return critic, b, y, cfg


def head_mse_error(critic, b, y) -> float:
    """Worst relative error over the three heads' own squared-error gradients."""
    worst = 0.0
    ys = {"trunc": y.trunc, "shift": y.shift, "q": y.q[:, None]}
    m = len(b)
    for head, target in ys.items():
        def loss():
            return float(np.sum((nets.forward(critic, b.s, b.a)[head] - target) ** 2) / m)

        out = nets.forward(critic, b.s, b.a)[head]
        grad, _ = critic.backward({head: 2 * (out - target) / m})
        worst = max(worst, rel_err(grad, fd_grad(loss, critic.params)))
    return worst


def entropy_group_error(critic, b, cfg) -> float:
    """Mean-entropy gradient restricted to each head layer versus finite differences."""
    worst = 0.0

    def mean_h():
        out = nets.forward(critic, b.s, b.a)
        return float(np.mean(entropy_of_predictions(out["trunc"], out["shift"], cfg.variance_floor)))

    from compositeq.deep.targets import entropy_grad

    for layer, group in (("trunc", "trunc_heads"), ("shift", "shift_heads")):
        out = nets.forward(critic, b.s, b.a)
        dh = entropy_grad(out["trunc"], out["shift"], cfg.variance_floor) / len(b)
        analytic = critic.layer_grad(layer, dh)
        mask = critic.params.group_mask(group)
        numeric = fd_grad(mean_h, critic.params, mask)
        worst = max(worst, rel_err(analytic[mask], numeric[mask]))
    return worst


def full_critic_error(critic, b, y, cfg) -> float:
    """Full step gradient versus finite differences of each group's own objective:
    MSE + beta_tr H for trunc_heads, MSE - beta_sh H for shift_heads, MSE elsewhere."""
    _, _, grad, _ = composite_loss_and_grad(critic, b, y, cfg)
    sign = {"trunc_heads": cfg.beta_tr, "shift_heads": -cfg.beta_sh}
    worst = 0.0
    for group in critic.params.groups():
        w = sign.get(group, 0.0)

        def objective():
            mse, h, _, _ = composite_loss_and_grad(critic, b, y, cfg)
            return mse + w * h

        mask = critic.params.group_mask(group)
        numeric = fd_grad(objective, critic.params, mask)
        worst = max(worst, rel_err(grad[mask], numeric[mask]))
    return worst


def actor_error(rng, hidden=5, batch=6) -> float:
    critic = _randomize(nets.composite_critic(2, 2, 3, hidden, rng), rng)
    actor = _randomize(nets.actor_net(2, 2, (hidden, hidden), 1.0, rng), rng)
    s = rng.normal(size=(batch, 2))
    fn = net_critic_fn(critic, "q")

    def objective():
        return actor_gradient(actor, fn, s)[0]

    _, grad = actor_gradient(actor, fn, s)
    return rel_err(grad, fd_grad(objective, actor.params))
