import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compositeq import oracle
from compositeq.chains import generate_batch, make_deterministic_chain, make_probe, make_stochastic_chain
from compositeq.mdp import Transition, make_rng, sample_step
from compositeq.runs import LearnerSpec, auc, convergence_step, run_learner
from compositeq.tabular import (
    DeltaTables,
    QTables,
    composite_step,
    epsilon_greedy,
    gamma_schedule,
    nstep_model_step,
    nstep_onpolicy_step,
    shifted_only_step,
    td_delta_step,
    vanilla_step,
)

PROBE_T = Transition(0, 0, 1.0, 1, True)


def on_support_transitions(mdp):
    for s in mdp.nonterminal_states:
        for a in range(mdp.num_actions):
            for b in mdp.branches(s, a):
                for _, r in b.reward.atoms:
                    yield Transition(s, a, r, b.next_state, b.next_state in mdp.terminal)


# -- vanilla -------------------------------------------------------------------------


def test_vanilla_hand_examples():
    q = vanilla_step(np.zeros((2, 1)), PROBE_T, 0.5, 1.0)
    assert q[0, 0] == 0.5
    q = np.full((2, 1), 7.0)
    q[1] = 0
    assert vanilla_step(q, Transition(0, 0, -3.0, 1, True), 1.0, 0.9)[0, 0] == -3.0


def test_vanilla_fixed_point():
    mdp = make_deterministic_chain(12)
    q_star = oracle.value_iteration(mdp)
    for t in on_support_transitions(mdp):
        q = vanilla_step(q_star.copy(), t, 0.3, mdp.gamma)
        assert np.max(np.abs(q - q_star)) <= 1e-12


def test_alpha_range_checked():
    with pytest.raises(ValueError):
        vanilla_step(np.zeros((2, 1)), PROBE_T, 0.0, 1.0)
    with pytest.raises(ValueError):
        composite_step(QTables.zeros(2, 1, 2), PROBE_T, (0.1, 1.5, 0.1), 1.0)


# -- composite -----------------------------------------------------------------------


def test_composite_probe_done_transition():
    tables = composite_step(QTables.zeros(2, 1, 3), PROBE_T, (0.2, 0.5, 0.7), 1.0)
    assert np.all(tables.trunc[:, 0, 0] == 0.5)
    assert np.all(tables.shift == 0)
    assert tables.q[0, 0] == 0.2


def test_composite_hand_targets():
    # s0 --r=2--> s1 (non-terminal); at s1, action 1 is greedy.
    t = Transition(0, 0, 2.0, 1, False)
    tb = QTables.zeros(3, 2, 2)
    tb.q[1] = [1.0, 5.0]
    tb.trunc[:, 1, 1] = [10.0, 20.0]
    tb.shift[:, 1, 1] = [30.0, 40.0]
    tb.trunc[:, 1, 0] = 99.0  # non-greedy action must be ignored
    composite_step(tb, t, (1.0, 1.0, 1.0), 0.5)
    assert np.allclose(tb.trunc[:, 0, 0], [2.0, 2.0 + 0.5 * 10])
    assert np.allclose(tb.shift[:, 0, 0], [0.5 * 5.0, 0.5 * 30])
    assert tb.q[0, 0] == pytest.approx(2.0 + 0.5 * (20 + 40))


@pytest.mark.parametrize("make", [lambda: make_deterministic_chain(20),
                                  lambda: make_deterministic_chain(10, 0.9),
                                  lambda: make_stochastic_chain(10)])
def test_composite_fixed_point(make):
    mdp = make()
    ref = QTables.from_oracle(mdp, 4)
    for t in on_support_transitions(mdp):
        if mdp is not None and len(mdp.branches(t.s, t.a)[0].reward.atoms) > 1:
            continue  # stochastic rewards: only the expectation is a fixed point
        tb = composite_step(ref.copy(), t, (0.3, 0.5, 0.7), mdp.gamma)
        for a, b in ((tb.q, ref.q), (tb.trunc, ref.trunc), (tb.shift, ref.shift)):
            assert np.max(np.abs(a - b)) <= 1e-12


def test_composite_expected_update_fixed_point_stochastic():
    # With stochastic rewards, the expected update over reward atoms is a no-op.
    mdp = make_stochastic_chain(8)
    ref = QTables.from_oracle(mdp, 3)
    for s in mdp.nonterminal_states:
        for a in range(2):
            (b,) = mdp.branches(s, a)
            mean = QTables.zeros(8, 2, 3)
            for p, r in b.reward.atoms:
                tb = composite_step(ref.copy(), Transition(s, a, r, b.next_state, b.next_state in mdp.terminal),
                                    (0.5, 0.5, 0.5), 1.0)
                mean.q += p * tb.q
                mean.trunc += p * tb.trunc
                mean.shift += p * tb.shift
            assert np.max(np.abs(mean.q - ref.q)) < 1e-10
            assert np.max(np.abs(mean.trunc - ref.trunc)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.floats(0.5, 1.0))
def test_composite_terminal_rows_and_order_independence(seed, n, gamma):
    mdp = make_deterministic_chain(8, gamma)
    rng = make_rng(seed)
    tb = QTables.zeros(8, 3, n)
    tb.q[:6] = rng.normal(size=(6, 3))
    tb.trunc[:, :6] = rng.normal(size=(n, 6, 3))
    tb.shift[:, :6] = rng.normal(size=(n, 6, 3))
    for _ in range(30):
        s = int(rng.integers(0, 6))
        a = int(rng.integers(0, 3))
        t = sample_step(mdp, s, a, rng)
        before = tb.copy()
        composite_step(tb, t, (0.3, 0.2, 0.6), gamma)
        # reverse write order built from the same pre-step targets
        rev = before.copy()
        from compositeq.tabular import composite_targets

        y_tr, y_sh, y_q = composite_targets(before, t, gamma)
        rev.q[s, a] = 0.7 * before.q[s, a] + 0.3 * y_q
        for i in reversed(range(n)):
            rev.shift[i, s, a] = 0.4 * before.shift[i, s, a] + 0.6 * y_sh[i]
            rev.trunc[i, s, a] = 0.8 * before.trunc[i, s, a] + 0.2 * y_tr[i]
        assert np.array_equal(rev.q, tb.q)
        assert np.array_equal(rev.trunc, tb.trunc)
        assert np.array_equal(rev.shift, tb.shift)
    assert np.all(tb.q[6:] == 0) and np.all(tb.trunc[:, 6:] == 0) and np.all(tb.shift[:, 6:] == 0)


# -- shifted, n-step, model ------------------------------------------------------------


def test_shifted_only():
    q, sh = shifted_only_step(np.zeros((2, 1)), np.zeros((2, 1)), PROBE_T, (1.0, 1.0), 0.9)
    assert q[0, 0] == 1.0 and sh[0, 0] == 0.0
    mdp = make_deterministic_chain(12)
    q_star = oracle.value_iteration(mdp)
    pi = oracle.greedy_policy(q_star)
    shift1 = oracle.shifted_oracle(mdp, pi, q_star, 1)[0]
    for t in on_support_transitions(mdp):
        q2, s2 = shifted_only_step(q_star.copy(), shift1.copy(), t, (0.4, 0.4), 1.0)
        assert np.max(np.abs(q2 - q_star)) <= 1e-12
        assert np.max(np.abs(s2 - shift1)) <= 1e-12


def test_nstep_onpolicy():
    window = [Transition(0, 0, -1.0, 1, False), Transition(1, 0, -1.0, 2, False)]
    q = nstep_onpolicy_step(np.zeros((3, 1)), window, 1.0, 1.0)
    assert q[0, 0] == -2.0
    t = Transition(0, 0, 0.7, 1, False)
    q0 = np.array([[0.1], [0.5], [0.0]])
    assert np.array_equal(nstep_onpolicy_step(q0.copy(), [t], 0.3, 0.9),
                          vanilla_step(q0.copy(), t, 0.3, 0.9))
    with pytest.raises(ValueError):
        nstep_onpolicy_step(np.zeros((4, 1)), [window[0], Transition(3, 0, 0.0, 1, False)], 0.5, 1.0)


def test_nstep_model():
    mdp = make_deterministic_chain(12)
    q_star = oracle.value_iteration(mdp)
    for t in on_support_transitions(mdp):
        q = nstep_model_step(q_star.copy(), t, mdp, 4, 0.5, make_rng(0))
        assert np.max(np.abs(q - q_star)) <= 1e-12
    t = Transition(3, 0, -1.0, 4, False)
    q0 = np.random.default_rng(1).normal(size=(12, 3))
    q0[10:] = 0
    assert np.array_equal(nstep_model_step(q0.copy(), t, mdp, 1, 0.3, make_rng(0)),
                          vanilla_step(q0.copy(), t, 0.3, 1.0))


# -- TD(Delta) -------------------------------------------------------------------------


def test_gamma_schedule():
    assert gamma_schedule(1) == [0.0]
    assert gamma_schedule(4) == [0.0, 0.5, 0.75, 0.875]
    assert gamma_schedule(8) == [0, 0.5, 0.75, 0.875, 0.9375, 0.96875, 0.984375, 0.99]
    with pytest.raises(ValueError):
        gamma_schedule(0)


def test_td_delta_probe_fixed_point():
    gammas = gamma_schedule(4)
    tb = DeltaTables.zeros(2, 1, gammas)
    tb.heads[0, 0, 0] = 1.0
    td_delta_step(tb, PROBE_T, 0.7)
    assert tb.heads[0, 0, 0] == 1.0 and np.all(tb.heads[1:] == 0)
    assert tb.q()[0, 0] == 1.0


def test_td_delta_oracle_fixed_point_on_chain():
    mdp = make_stochastic_chain(6)
    gammas = gamma_schedule(5)
    pi = oracle.greedy_policy(oracle.value_iteration(mdp.with_gamma(gammas[-1])))
    ref = DeltaTables(np.stack(oracle.delta_oracle(mdp, pi, gammas)), gammas)
    for s in mdp.nonterminal_states:
        for a in range(2):
            (b,) = mdp.branches(s, a)
            mean = np.zeros_like(ref.heads)
            for p, r in b.reward.atoms:
                tb = DeltaTables(ref.heads.copy(), gammas)
                td_delta_step(tb, Transition(s, a, r, b.next_state, b.next_state in mdp.terminal), 0.5)
                mean += p * tb.heads
            assert np.max(np.abs(mean - ref.heads)) < 1e-10


def test_delta_tables_validation():
    with pytest.raises(ValueError):
        DeltaTables.zeros(2, 1, [0.0, 0.0])
    with pytest.raises(ValueError):
        DeltaTables.zeros(2, 1, [0.0, 1.0])


# -- epsilon-greedy ----------------------------------------------------------------------


def test_epsilon_greedy():
    q = np.array([[0.0, 2.0, 1.0]])
    rng = make_rng(0)
    assert all(epsilon_greedy(q, 0, 0.0, rng) == 1 for _ in range(100))
    picks = np.array([epsilon_greedy(q, 0, 1.0, rng) for _ in range(30_000)])
    assert np.all(np.abs(np.bincount(picks, minlength=3) / 30_000 - 1 / 3) < 0.01)
    picks = np.array([epsilon_greedy(q, 0, 0.1, rng) for _ in range(100_000)])
    assert abs(np.mean(picks == 1) - (0.9 + 0.1 / 3)) < 0.01


# -- compiled runs versus the reference steps --------------------------------------------


class _Replay:
    """Stand-in generator that hands out a fixed row of uniforms in order."""

    def __init__(self, row):
        self.row, self.i = row, 0

    def random(self):
        self.i += 1
        return self.row[self.i - 1]


def python_batch_run(mdp, spec, seed, budget):
    rng = make_rng(seed)
    optimal = oracle.optimal_policy(mdp)
    batch = generate_batch(mdp, 30, 0.2, optimal, rng)
    idx = rng.integers(0, len(batch), size=budget)
    extra = 2 * (spec.n - 1) if spec.kind == "nstep_model" else 0
    u = rng.random((budget, extra)) if extra else None
    S, A = mdp.num_states, mdp.num_actions
    bounds = {}
    for start, end in batch.episode_bounds():
        for i in range(start, end):
            bounds[i] = end
    q = np.zeros((S, A))
    tb = QTables.zeros(S, A, spec.n)
    sh = np.zeros((S, A))
    dt = DeltaTables.zeros(S, A, spec.gammas or [0.0])
    for j, i in enumerate(idx):
        t = batch.transitions[i]
        if spec.kind == "vanilla":
            vanilla_step(q, t, spec.alpha_q, mdp.gamma)
        elif spec.kind == "composite":
            composite_step(tb, t, (spec.alpha_q, spec.alpha_tr, spec.alpha_sh), mdp.gamma)
        elif spec.kind == "shifted":
            shifted_only_step(q, sh, t, (spec.alpha_q, spec.alpha_sh), mdp.gamma)
        elif spec.kind == "nstep_onpolicy":
            window = batch.transitions[i:min(i + spec.n, bounds[i])]
            nstep_onpolicy_step(q, window, spec.alpha_q, mdp.gamma)
        elif spec.kind == "nstep_model":
            nstep_model_step(q, t, mdp, spec.n, spec.alpha_q, _Replay(u[j]))
        elif spec.kind == "td_delta":
            td_delta_step(dt, t, spec.alpha_q)
    if spec.kind == "composite":
        return tb.q
    if spec.kind == "td_delta":
        return dt.q()
    return q


@pytest.mark.parametrize("kind", ["vanilla", "composite", "shifted", "nstep_onpolicy",
                                  "nstep_model", "td_delta"])
@pytest.mark.parametrize("mdp", [make_deterministic_chain(8, 0.95), make_stochastic_chain(6, 0.9)],
                         ids=["det", "stoch"])
def test_compiled_matches_reference(kind, mdp):
    spec = LearnerSpec(kind, n=3, alpha_q=0.2, alpha_tr=0.3, alpha_sh=0.4)
    res = run_learner(mdp, spec, 11, 3000, every=500, episodes=30, nonoptimal_frac=0.2)
    ref = python_batch_run(mdp, spec, 11, 3000)
    assert np.allclose(res.q, ref, rtol=0, atol=1e-12)


def test_online_composite_learns_probe():
    res = run_learner(make_probe(), LearnerSpec("composite", n=2, alpha_q=0.5, alpha_tr=0.5, alpha_sh=0.5),
                      0, 2000, every=100, mode="online", behavior="eps_greedy")
    assert res.q[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_run_is_deterministic():
    mdp = make_deterministic_chain(10)
    spec = LearnerSpec("composite")
    a = run_learner(mdp, spec, 3, 20_000, every=1000)
    b = run_learner(mdp, spec, 3, 20_000, every=1000)
    assert np.array_equal(a.metrics, b.metrics)


def test_convergence_step_and_auc():
    steps = np.array([1000, 2000, 3000, 4000])
    assert convergence_step(steps, np.array([0, 1, 0, 1])) == 4000
    assert convergence_step(steps, np.array([0, 1, 1, 1])) == 2000
    assert convergence_step(steps, np.array([1, 1, 1, 0])) is None
    assert auc([0, 10], [2.0, 2.0]) == 2.0
    assert auc([0, 1, 3], [0.0, 1.0, 1.0]) == pytest.approx((0.5 + 2.0) / 3)


def test_settle_stop_keeps_convergence_step():
    mdp = make_deterministic_chain(10)
    spec = LearnerSpec("composite")
    full = run_learner(mdp, spec, 0, 3_000_000, every=1000)
    early = run_learner(mdp, spec, 0, 3_000_000, every=1000, stop_on_settle=True)
    assert early.steps[-1] < full.steps[-1]
    assert early.convergence_step() == full.convergence_step()
