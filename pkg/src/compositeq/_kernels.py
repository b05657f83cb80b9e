"""Compiled inner loops for long tabular runs.

Random inputs are generated outside with PCG64 and passed in as arrays, so a
run is reproducible regardless of the JIT. Each driver processes one chunk of
updates and records checkpoint metrics whenever the global update counter hits
a multiple of ``every``.
"""
import numpy as np
from numba import njit

KIND_VANILLA = 0
KIND_COMPOSITE = 1
KIND_SHIFTED = 2
KIND_NSTEP_ONPOLICY = 3
KIND_NSTEP_MODEL = 4
KIND_TD_DELTA = 5

BEHAVIOR_MIXING = 0
BEHAVIOR_EPS_GREEDY = 1


@njit(cache=True)
def _argmax_row(q, s):
    best = 0
    v = q[s, 0]
    for a in range(1, q.shape[1]):
        if q[s, a] > v:
            v = q[s, a]
            best = a
    return best


@njit(cache=True)
def _pick(cum, lo, hi, u):
    for i in range(lo, hi):
        if u < cum[i]:
            return i
    return hi - 1


@njit(cache=True)
def _sample(s, a, num_actions, branch_start, branch_cum, branch_next, atom_start,
            atom_cum, atom_val, u_branch, u_atom):
    sa = s * num_actions + a
    b = _pick(branch_cum, branch_start[sa], branch_start[sa + 1], u_branch)
    j = _pick(atom_cum, atom_start[b], atom_start[b + 1], u_atom)
    return branch_next[b], atom_val[j]


@njit(cache=True)
def _vanilla(q, s, a, r, s2, done, alpha, gamma):
    boot = 0.0
    if not done:
        boot = gamma * q[s2, _argmax_row(q, s2)]
    q[s, a] = (1.0 - alpha) * q[s, a] + alpha * (r + boot)


@njit(cache=True)
def _composite(q, tr, sh, s, a, r, s2, done, aq, atr, ash, gamma):
    n = tr.shape[0]
    if done:
        for i in range(n):
            tr[i, s, a] = (1.0 - atr) * tr[i, s, a] + atr * r
            sh[i, s, a] = (1.0 - ash) * sh[i, s, a]
        q[s, a] = (1.0 - aq) * q[s, a] + aq * r
        return
    b = _argmax_row(q, s2)
    y_q = r + gamma * (tr[n - 1, s2, b] + sh[n - 1, s2, b])
    y_sh0 = gamma * q[s2, b]
    # Descending order: head i reads head i-1 before head i-1 is written.
    for i in range(n - 1, 0, -1):
        tr[i, s, a] = (1.0 - atr) * tr[i, s, a] + atr * (r + gamma * tr[i - 1, s2, b])
        sh[i, s, a] = (1.0 - ash) * sh[i, s, a] + ash * (gamma * sh[i - 1, s2, b])
    tr[0, s, a] = (1.0 - atr) * tr[0, s, a] + atr * r
    sh[0, s, a] = (1.0 - ash) * sh[0, s, a] + ash * y_sh0
    q[s, a] = (1.0 - aq) * q[s, a] + aq * y_q


@njit(cache=True)
def _shifted(q, sh1, s, a, r, s2, done, aq, ash, gamma):
    if done:
        sh1[s, a] = (1.0 - ash) * sh1[s, a]
        q[s, a] = (1.0 - aq) * q[s, a] + aq * r
        return
    b = _argmax_row(q, s2)
    y_sh = gamma * q[s2, b]
    y_q = r + sh1[s, a]
    sh1[s, a] = (1.0 - ash) * sh1[s, a] + ash * y_sh
    q[s, a] = (1.0 - aq) * q[s, a] + aq * y_q


@njit(cache=True)
def _td_delta(w, gammas, s, a, r, s2, done, alpha):
    k = w.shape[0]
    if done:
        w[0, s, a] = (1.0 - alpha) * w[0, s, a] + alpha * r
        for i in range(1, k):
            w[i, s, a] = (1.0 - alpha) * w[i, s, a]
        return
    A = w.shape[2]
    best = 0
    best_v = -np.inf
    for c in range(A):
        tot = 0.0
        for i in range(k):
            tot += w[i, s2, c]
        if tot > best_v:
            best_v = tot
            best = c
    y = np.empty(k)
    prefix = w[0, s2, best]
    y[0] = r + gammas[0] * prefix
    for i in range(1, k):
        y[i] = (gammas[i] - gammas[i - 1]) * prefix + gammas[i] * w[i, s2, best]
        prefix += w[i, s2, best]
    for i in range(k):
        w[i, s, a] = (1.0 - alpha) * w[i, s, a] + alpha * y[i]


@njit(cache=True)
def _model_target(q, r, s2, done, n, gamma, u, ucol, num_actions, branch_start, branch_cum,
                  branch_next, atom_start, atom_cum, atom_val, terminal):
    target = r
    disc = gamma
    s = s2
    for j in range(n - 1):
        if done:
            break
        a = _argmax_row(q, s)
        s_new, rew = _sample(s, a, num_actions, branch_start, branch_cum, branch_next,
                             atom_start, atom_cum, atom_val, u[ucol + 2 * j], u[ucol + 2 * j + 1])
        target += disc * rew
        disc *= gamma
        s = s_new
        done = terminal[s]
    if not done:
        target += disc * q[s, _argmax_row(q, s)]
    return target


@njit(cache=True)
def _greedy_matches(q, ref, terminal):
    for s in range(q.shape[0]):
        if not terminal[s] and _argmax_row(q, s) != ref[s]:
            return 0.0
    return 1.0


@njit(cache=True)
def _record(out, row, kind, q, tr, sh, w, s0, ref, terminal):
    # Columns: q(s0, a), greedy-optimal flag, then per-head values at (s0, a).
    if kind == KIND_TD_DELTA:
        tot = 0.0
        for i in range(w.shape[0]):
            tot += w[i, s0, 0]
        out[row, 0] = tot
        out[row, 1] = _greedy_sum_matches(w, ref, terminal)
        for i in range(w.shape[0]):
            out[row, 2 + i] = w[i, s0, 0]
        return
    out[row, 0] = q[s0, 0]
    out[row, 1] = _greedy_matches(q, ref, terminal)
    if kind == KIND_COMPOSITE:
        n = tr.shape[0]
        for i in range(n):
            out[row, 2 + i] = tr[i, s0, 0]
            out[row, 2 + n + i] = sh[i, s0, 0]
    elif kind == KIND_SHIFTED:
        out[row, 2] = sh[0, s0, 0]


@njit(cache=True)
def _greedy_sum_matches(w, ref, terminal):
    k, S, A = w.shape
    for s in range(S):
        if terminal[s]:
            continue
        best = 0
        best_v = -np.inf
        for c in range(A):
            tot = 0.0
            for i in range(k):
                tot += w[i, s, c]
            if tot > best_v:
                best_v = tot
                best = c
        if best != ref[s]:
            return 0.0
    return 1.0


@njit(cache=True)
def _apply(kind, q, tr, sh, w, gammas, s, a, r, s2, done, aq, atr, ash, gamma):
    if kind == KIND_VANILLA:
        _vanilla(q, s, a, r, s2, done, aq, gamma)
    elif kind == KIND_COMPOSITE:
        _composite(q, tr, sh, s, a, r, s2, done, aq, atr, ash, gamma)
    elif kind == KIND_SHIFTED:
        _shifted(q, sh[0], s, a, r, s2, done, aq, ash, gamma)
    elif kind == KIND_TD_DELTA:
        _td_delta(w, gammas, s, a, r, s2, done, aq)


@njit(cache=True)
def run_batch_chunk(kind, idx, u, bs, ba, br, bs2, bdone, bend, q, tr, sh, w, gammas,
                    aq, atr, ash, gamma, n, start, every, s0, ref, model, out):
    """Updates on transitions ``idx`` of a fixed batch. Returns rows written to ``out``."""
    (num_actions, branch_start, branch_cum, branch_next, atom_start, atom_cum, atom_val,
     terminal) = model
    rows = 0
    for k in range(idx.shape[0]):
        i = idx[k]
        s = bs[i]
        a = ba[i]
        if kind == KIND_NSTEP_ONPOLICY:
            end = min(i + n, bend[i])
            target = 0.0
            disc = 1.0
            for j in range(i, end):
                target += disc * br[j]
                disc *= gamma
            last = end - 1
            if not bdone[last]:
                target += disc * q[bs2[last], _argmax_row(q, bs2[last])]
            q[s, a] = (1.0 - aq) * q[s, a] + aq * target
        elif kind == KIND_NSTEP_MODEL:
            target = _model_target(q, br[i], bs2[i], bdone[i], n, gamma, u[k], 0, num_actions,
                                   branch_start, branch_cum, branch_next, atom_start,
                                   atom_cum, atom_val, terminal)
            q[s, a] = (1.0 - aq) * q[s, a] + aq * target
        else:
            _apply(kind, q, tr, sh, w, gammas, s, a, br[i], bs2[i], bdone[i], aq, atr, ash, gamma)
        if (start + k + 1) % every == 0:
            _record(out, rows, kind, q, tr, sh, w, s0, ref, terminal)
            rows += 1
    return rows


@njit(cache=True)
def run_online_chunk(kind, u, state, ep_len, behavior, behavior_param, optimal, q, tr, sh, w,
                     gammas, aq, atr, ash, gamma, n, start, every, cap, s0, ref, model, out):
    """Updates on a live stream of behavior-policy transitions.

    Each update consumes ``u[k, 0:4]`` (coin, pick, branch, atom); the model
    rollout learner additionally uses ``u[k, 4:]``. ``state`` and ``ep_len``
    are one-element arrays carried between chunks.
    """
    (num_actions, branch_start, branch_cum, branch_next, atom_start, atom_cum, atom_val,
     terminal) = model
    rows = 0
    A = num_actions
    for k in range(u.shape[0]):
        s = state[0]
        coin = u[k, 0]
        pick = u[k, 1]
        if behavior == BEHAVIOR_MIXING:
            a = optimal[s]
            if A > 1 and coin < behavior_param:
                c = min(int(pick * (A - 1)), A - 2)
                a = c if c < a else c + 1
        else:
            if coin < behavior_param:
                a = min(int(pick * A), A - 1)
            elif kind == KIND_TD_DELTA:
                best = 0
                best_v = -np.inf
                for c in range(A):
                    tot = 0.0
                    for i in range(w.shape[0]):
                        tot += w[i, s, c]
                    if tot > best_v:
                        best_v = tot
                        best = c
                a = best
            else:
                a = _argmax_row(q, s)
        s2, r = _sample(s, a, A, branch_start, branch_cum, branch_next, atom_start, atom_cum,
                        atom_val, u[k, 2], u[k, 3])
        done = terminal[s2]
        if kind == KIND_NSTEP_MODEL:
            target = _model_target(q, r, s2, done, n, gamma, u[k], 4, A, branch_start,
                                   branch_cum, branch_next, atom_start, atom_cum, atom_val,
                                   terminal)
            q[s, a] = (1.0 - aq) * q[s, a] + aq * target
        else:
            _apply(kind, q, tr, sh, w, gammas, s, a, r, s2, done, aq, atr, ash, gamma)
        ep_len[0] += 1
        if done or ep_len[0] >= cap:
            state[0] = s0
            ep_len[0] = 0
        else:
            state[0] = s2
        if (start + k + 1) % every == 0:
            _record(out, rows, kind, q, tr, sh, w, s0, ref, terminal)
            rows += 1
    return rows
