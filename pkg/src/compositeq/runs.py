"""Seeded tabular training runs built on the compiled kernels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from compositeq import _kernels as K
from compositeq import oracle
from compositeq.chains import generate_batch
from compositeq.mdp import ReplayBuffer, TabularMdp, make_rng
from compositeq.tabular import LEARNER_KINDS, QTables, gamma_schedule

_KIND_CODES = {
    "vanilla": K.KIND_VANILLA,
    "composite": K.KIND_COMPOSITE,
    "shifted": K.KIND_SHIFTED,
    "nstep_onpolicy": K.KIND_NSTEP_ONPOLICY,
    "nstep_model": K.KIND_NSTEP_MODEL,
    "td_delta": K.KIND_TD_DELTA,
}

CHUNK = 1 << 18


@dataclass
class LearnerSpec:
    kind: str = "composite"
    n: int = 4
    alpha_q: float = 1e-3
    alpha_tr: float = 1e-3
    alpha_sh: float = 1e-2
    gammas: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        for al in (self.alpha_q, self.alpha_tr, self.alpha_sh):
            if not 0.0 < al <= 1.0:
                raise ValueError(f"learning rate {al} outside (0, 1]")
        if self.kind == "td_delta" and not self.gammas:
            self.gammas = tuple(gamma_schedule(self.n))

    def metric_names(self) -> list[str]:
        names = ["q_s0_a", "greedy_optimal"]
        if self.kind == "composite":
            names += [f"trunc_{i}_s0_a" for i in range(1, self.n + 1)]
            names += [f"shift_{i}_s0_a" for i in range(1, self.n + 1)]
        elif self.kind == "shifted":
            names.append("shift_1_s0_a")
        elif self.kind == "td_delta":
            names += [f"w_{i}_s0_a" for i in range(1, len(self.gammas) + 1)]
        return names


@dataclass
class TabularResult:
    steps: np.ndarray
    metrics: np.ndarray
    names: list[str]
    q: np.ndarray
    tables: dict = field(default_factory=dict)

    def series(self, name: str) -> np.ndarray:
        return self.metrics[:, self.names.index(name)]

    def convergence_step(self) -> int | None:
        return convergence_step(self.steps, self.series("greedy_optimal"))


def convergence_step(steps: np.ndarray, greedy_optimal: np.ndarray) -> int | None:
    """First checkpoint from which the greedy policy stays optimal to the end of the run."""
    ok = np.asarray(greedy_optimal) >= 0.5
    if ok.size == 0 or not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    first = 0 if bad.size == 0 else bad[-1] + 1
    return int(steps[first])


def auc(steps, values) -> float:
    """Trapezoidal area under a learning curve divided by its step span.

    The result has the units of ``values``: a run whose curve is constant at
    ``c`` scores ``c`` regardless of length. A single point scores itself.
    """
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if steps.shape != values.shape or steps.size == 0:
        raise ValueError("steps and values must be non-empty and equally long")
    if steps.size == 1:
        return float(values[0])
    span = steps[-1] - steps[0]
    if span <= 0:
        raise ValueError("steps must increase")
    area = np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(steps))
    return float(area / span)


def welch_test(a, b) -> tuple[float, float]:
    """Unequal-variance two-sample t statistic and two-sided p-value (``nan`` below two samples each)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        return float("nan"), float("nan")
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def _settle_check(mdp: TabularMdp, learner: LearnerSpec):
    if learner.kind not in ("vanilla", "composite"):
        return None
    q_star = oracle.value_iteration(mdp)
    nonterm = np.asarray(mdp.nonterminal_states)
    srt = np.sort(q_star[nonterm], axis=1)
    gap = float(np.min(srt[:, -1] - srt[:, -2])) if mdp.num_actions > 1 else np.inf
    half = gap / 2.0
    if learner.kind == "composite":
        full = QTables.from_oracle(mdp, learner.n)

    def check(q, tr, sh):
        if np.max(np.abs(q[nonterm] - q_star[nonterm])) >= half:
            return False
        if learner.kind == "composite":
            if np.max(np.abs(tr[:, nonterm] - full.trunc[:, nonterm])) >= half:
                return False
            if np.max(np.abs(sh[:, nonterm] - full.shift[:, nonterm])) >= half:
                return False
        return True

    return check


def _model_tuple(mdp: TabularMdp):
    f = mdp.flat_model()
    return (mdp.num_actions, f["branch_start"], f["branch_cum"], f["branch_next"],
            f["atom_start"], f["atom_cum"], f["atom_val"], f["terminal"])


def _reference_policy(mdp: TabularMdp, learner: LearnerSpec) -> np.ndarray:
    if learner.kind == "td_delta":
        return oracle.greedy_policy(oracle.value_iteration(mdp.with_gamma(learner.gammas[-1])))
    return oracle.optimal_policy(mdp)


def run_learner(
    mdp: TabularMdp,
    learner: LearnerSpec,
    seed: int,
    budget: int,
    every: int = 1000,
    *,
    mode: str = "batch",
    episodes: int = 1000,
    nonoptimal_frac: float = 0.1,
    behavior: str = "mixing",
    epsilon: float = 0.1,
    batch: ReplayBuffer | None = None,
    on_checkpoints=None,
    stop_on_settle: bool = False,
) -> TabularResult:
    """Train one learner for ``budget`` updates.

    ``mode="batch"`` draws single transitions uniformly from a fixed batch of
    ``episodes`` behavior episodes (generated first from the same seed unless
    passed in). ``mode="online"`` learns from a live behavior stream instead.
    ``on_checkpoints(steps, rows)`` is called after every chunk.

    With ``stop_on_settle`` the run ends after the first chunk at which every
    learned table is within half the smallest action gap of its oracle value
    (see ``_settle_check``); the greedy policy can no longer change after that
    for learners whose tables only move toward the oracle.
    """
    rng = make_rng(seed)
    S, A, n = mdp.num_states, mdp.num_actions, learner.n
    optimal = oracle.optimal_policy(mdp)
    ref = _reference_policy(mdp, learner)
    model = _model_tuple(mdp)
    terminal = model[-1]
    kind = _KIND_CODES[learner.kind]

    q = np.zeros((S, A))
    heads = n if learner.kind in ("composite", "shifted") else 1
    tr = np.zeros((heads, S, A))
    sh = np.zeros((heads, S, A))
    gammas = np.asarray(learner.gammas if learner.kind == "td_delta" else (0.0,), np.float64)
    w = np.zeros((len(gammas), S, A))
    names = learner.metric_names()
    width = max(len(names), 2)
    extra = 2 * (n - 1) if learner.kind == "nstep_model" else 0

    if mode == "batch":
        if batch is None:
            batch = generate_batch(mdp, episodes, nonoptimal_frac, optimal, rng)
        arr = batch.as_arrays()
    elif mode == "online":
        if learner.kind == "nstep_onpolicy":
            raise ValueError("nstep_onpolicy needs a stored batch; use mode='batch'")
        state = np.array([mdp.initial_state], np.int64)
        ep_len = np.zeros(1, np.int64)
        beh_code = K.BEHAVIOR_MIXING if behavior == "mixing" else K.BEHAVIOR_EPS_GREEDY
        beh_param = nonoptimal_frac if behavior == "mixing" else epsilon
    else:
        raise ValueError(f"unknown mode {mode!r}")

    settle = _settle_check(mdp, learner) if stop_on_settle else None
    all_steps, all_rows = [], []
    done_updates = 0
    while done_updates < budget:
        m = min(CHUNK, budget - done_updates)
        out = np.zeros((m // every + 1, width))
        if mode == "batch":
            idx = rng.integers(0, len(batch), size=m)
            u = rng.random((m, extra)) if extra else np.zeros((m, 0))
            rows = K.run_batch_chunk(
                kind, idx, u, arr["s"], arr["a"], arr["r"], arr["s_next"], arr["done"],
                arr["episode_end"], q, tr, sh, w, gammas, learner.alpha_q, learner.alpha_tr,
                learner.alpha_sh, mdp.gamma, n, done_updates, every, mdp.initial_state, ref,
                model, out)
        else:
            u = rng.random((m, 4 + extra))
            rows = K.run_online_chunk(
                kind, u, state, ep_len, beh_code, beh_param, optimal, q, tr, sh, w, gammas,
                learner.alpha_q, learner.alpha_tr, learner.alpha_sh, mdp.gamma, n,
                done_updates, every, 10 * S, mdp.initial_state, ref, model, out)
        first = (done_updates // every + 1) * every
        steps = np.arange(first, first + rows * every, every, dtype=np.int64)
        all_steps.append(steps)
        all_rows.append(out[:rows, : len(names)])
        if on_checkpoints is not None:
            on_checkpoints(steps, out[:rows, : len(names)])
        done_updates += m
        if stop_on_settle and settle is not None and settle(q, tr, sh):
            break

    tables = {}
    if learner.kind == "composite":
        tables = {"trunc": tr, "shift": sh}
    elif learner.kind == "shifted":
        tables = {"shift": sh}
    elif learner.kind == "td_delta":
        tables = {"heads": w, "gammas": gammas}
        q = w.sum(axis=0)
    return TabularResult(
        np.concatenate(all_steps) if all_steps else np.zeros(0, np.int64),
        np.concatenate(all_rows) if all_rows else np.zeros((0, len(names))),
        names, q, tables)


__all__ = ["LearnerSpec", "TabularResult", "run_learner", "convergence_step", "QTables"]
