"""Finite MDPs with discrete stochastic rewards, transition sampling and replay storage.

Random draws always come from a ``numpy.random.Generator`` backed by PCG64.
``sample_step`` consumes exactly two uniform doubles per call: the first picks
the outcome branch, the second picks the reward atom inside that branch.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

PROB_TOL = 1e-12
RNG_ALGORITHM = "PCG64"

MDP_FORMAT_HEADER = "# compositeq-mdp v1"
BUFFER_FORMAT_HEADER = "# compositeq-buffer v1"


class MdpError(ValueError):
    """Raised for malformed MDPs or invalid queries against one."""


class TerminalStateError(MdpError):
    """Raised when a terminal state is used where a non-terminal one is required."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _check_probs(probs: Sequence[float], what: str) -> None:
    if len(probs) == 0:
        raise MdpError(f"{what}: empty distribution")
    for p in probs:
        if not (0.0 < p <= 1.0):
            raise MdpError(f"{what}: probability {p!r} outside (0, 1]")
    total = math.fsum(probs)
    if abs(total - 1.0) > PROB_TOL:
        raise MdpError(f"{what}: probabilities sum to {total!r}, expected 1")


def _pick(cumulative: Sequence[float], u: float) -> int:
    # First index whose cumulative mass exceeds u; the last index absorbs rounding.
    for i, c in enumerate(cumulative):
        if u < c:
            return i
    return len(cumulative) - 1


@dataclass(frozen=True)
class RewardDist:
    """Finite distribution over reward values, as ``(probability, value)`` atoms."""

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        atoms = tuple((float(p), float(v)) for p, v in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        _check_probs([p for p, _ in atoms], "reward distribution")
        if not all(math.isfinite(v) for _, v in atoms):
            raise MdpError("reward distribution: non-finite reward value")

    @classmethod
    def constant(cls, value: float) -> "RewardDist":
        return cls(((1.0, value),))

    @property
    def mean(self) -> float:
        return math.fsum(p * v for p, v in self.atoms)

    def cumulative(self) -> list[float]:
        return list(np.cumsum([p for p, _ in self.atoms]))


@dataclass(frozen=True)
class Branch:
    prob: float
    next_state: int
    reward: RewardDist


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    done: bool


@dataclass(frozen=True)
class TabularMdp:
    """A finite MDP.

    ``outcomes`` maps every non-terminal ``(s, a)`` to its outcome branches.
    Terminal states have no outgoing outcomes and carry value zero.

    With ``gamma == 1`` the MDP must be absorbing in the stochastic-shortest-path
    sense: a terminal state is reachable from every non-terminal state, and any
    action that lets a policy stay away from the terminals forever has strictly
    negative expected reward, so every non-terminating policy has value -inf.
    """

    num_states: int
    num_actions: int
    outcomes: dict[tuple[int, int], tuple[Branch, ...]]
    terminal: frozenset[int]
    initial_state: int
    gamma: float
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "terminal", frozenset(int(t) for t in self.terminal))
        outcomes = {(int(s), int(a)): tuple(bs) for (s, a), bs in self.outcomes.items()}
        object.__setattr__(self, "outcomes", outcomes)
        if self.num_states < 1 or self.num_actions < 1:
            raise MdpError("need at least one state and one action")
        if not (0.0 <= self.gamma <= 1.0):
            raise MdpError(f"gamma {self.gamma!r} outside [0, 1]")
        self._check_state(self.initial_state)
        for t in self.terminal:
            self._check_state(t)
        for (s, a), branches in outcomes.items():
            self._check_state(s)
            self._check_action(a)
            if s in self.terminal:
                raise MdpError(f"terminal state {s} has outgoing outcomes")
            _check_probs([b.prob for b in branches], f"outcomes of ({s}, {a})")
            for b in branches:
                self._check_state(b.next_state)
        for s in self.nonterminal_states:
            for a in range(self.num_actions):
                if (s, a) not in outcomes:
                    raise MdpError(f"missing outcomes for non-terminal ({s}, {a})")
        if self.gamma == 1.0:
            self._check_absorbing()

    # -- validation -----------------------------------------------------

    def _check_state(self, s: int) -> None:
        if not (0 <= s < self.num_states):
            raise IndexError(f"state {s} out of range [0, {self.num_states})")

    def _check_action(self, a: int) -> None:
        if not (0 <= a < self.num_actions):
            raise IndexError(f"action {a} out of range [0, {self.num_actions})")

    def _check_absorbing(self) -> None:
        nonterm = set(self.nonterminal_states)
        # States from which terminal is reachable under some action sequence.
        reach = set(self.terminal)
        changed = True
        while changed:
            changed = False
            for (s, a), bs in self.outcomes.items():
                if s not in reach and any(b.next_state in reach for b in bs):
                    reach.add(s)
                    changed = True
        stuck = nonterm - reach
        if stuck:
            raise MdpError(f"gamma=1 but no terminal reachable from states {sorted(stuck)}")
        # Largest set in which some policy can remain forever.
        trap = set(nonterm)
        changed = True
        while changed:
            changed = False
            for s in list(trap):
                if not any(
                    all(b.next_state in trap for b in self.outcomes[(s, a)])
                    for a in range(self.num_actions)
                ):
                    trap.discard(s)
                    changed = True
        for s in trap:
            for a in range(self.num_actions):
                bs = self.outcomes[(s, a)]
                if all(b.next_state in trap for b in bs):
                    mean = math.fsum(b.prob * b.reward.mean for b in bs)
                    if mean >= 0.0:
                        raise MdpError(
                            f"gamma=1 but ({s}, {a}) allows a non-terminating policy "
                            f"with expected reward {mean} >= 0"
                        )

    # -- queries ----------------------------------------------------------

    @property
    def nonterminal_states(self) -> list[int]:
        return [s for s in range(self.num_states) if s not in self.terminal]

    def is_terminal(self, s: int) -> bool:
        self._check_state(s)
        return s in self.terminal

    def branches(self, s: int, a: int) -> tuple[Branch, ...]:
        self._check_state(s)
        self._check_action(a)
        if s in self.terminal:
            raise TerminalStateError(f"state {s} is terminal")
        return self.outcomes[(s, a)]

    def with_gamma(self, gamma: float) -> "TabularMdp":
        return TabularMdp(
            self.num_states, self.num_actions, self.outcomes, self.terminal, self.initial_state, gamma
        )

    def expected_reward_table(self) -> np.ndarray:
        if "R" not in self._cache:
            R = np.zeros((self.num_states, self.num_actions))
            for (s, a), bs in self.outcomes.items():
                R[s, a] = math.fsum(b.prob * p * v for b in bs for p, v in b.reward.atoms)
            R.setflags(write=False)
            self._cache["R"] = R
        return self._cache["R"]

    def transition_matrix(self) -> sp.csr_matrix:
        """Sparse ``(S*A, S)`` matrix of next-state probabilities; terminal rows are empty."""
        if "P" not in self._cache:
            rows, cols, vals = [], [], []
            for (s, a), bs in self.outcomes.items():
                for b in bs:
                    rows.append(s * self.num_actions + a)
                    cols.append(b.next_state)
                    vals.append(b.prob)
            shape = (self.num_states * self.num_actions, self.num_states)
            self._cache["P"] = sp.csr_matrix((vals, (rows, cols)), shape=shape)
        return self._cache["P"]

    def flat_model(self) -> dict[str, np.ndarray]:
        """Packed arrays for compiled samplers.

        ``branch_start[s*A+a]:branch_start[s*A+a+1]`` indexes the branches of
        ``(s, a)``; each branch owns ``atom_start[b]:atom_start[b+1]`` atoms.
        Cumulative probabilities are stored so samplers mirror ``sample_step``.
        """
        if "flat" not in self._cache:
            A = self.num_actions
            branch_start = [0]
            branch_cum, branch_next, atom_start = [], [], [0]
            atom_cum, atom_val = [], []
            for sa in range(self.num_states * A):
                s, a = divmod(sa, A)
                bs = self.outcomes.get((s, a), ())
                cum = np.cumsum([b.prob for b in bs]) if bs else []
                for b, c in zip(bs, cum):
                    branch_cum.append(c)
                    branch_next.append(b.next_state)
                    atom_cum.extend(b.reward.cumulative())
                    atom_val.extend(v for _, v in b.reward.atoms)
                    atom_start.append(len(atom_val))
                branch_start.append(len(branch_next))
            terminal = np.zeros(self.num_states, dtype=np.bool_)
            terminal[list(self.terminal)] = True
            self._cache["flat"] = {
                "branch_start": np.asarray(branch_start, dtype=np.int64),
                "branch_cum": np.asarray(branch_cum, dtype=np.float64),
                "branch_next": np.asarray(branch_next, dtype=np.int64),
                "atom_start": np.asarray(atom_start, dtype=np.int64),
                "atom_cum": np.asarray(atom_cum, dtype=np.float64),
                "atom_val": np.asarray(atom_val, dtype=np.float64),
                "terminal": terminal,
            }
        return self._cache["flat"]


def expected_reward(mdp: TabularMdp, s: int, a: int) -> float:
    return math.fsum(b.prob * p * v for b in mdp.branches(s, a) for p, v in b.reward.atoms)


def sample_step(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator) -> Transition:
    branches = mdp.branches(s, a)
    u_branch = rng.random()
    u_atom = rng.random()
    b = branches[_pick(np.cumsum([x.prob for x in branches]), u_branch)]
    _, r = b.reward.atoms[_pick(b.reward.cumulative(), u_atom)]
    return Transition(s, a, r, b.next_state, b.next_state in mdp.terminal)


class ReplayBuffer:
    """Ordered transition store that keeps episode boundaries.

    Within an episode, each record's ``s_next`` must equal the next record's ``s``.
    """

    def __init__(self) -> None:
        self.transitions: list[Transition] = []
        self.episode_starts: list[int] = []

    def __len__(self) -> int:
        return len(self.transitions)

    def start_episode(self) -> None:
        if self.episode_starts and self.episode_starts[-1] == len(self.transitions):
            return
        self.episode_starts.append(len(self.transitions))

    def add(self, t: Transition) -> None:
        if not self.episode_starts:
            self.start_episode()
        if len(self.transitions) > self.episode_starts[-1]:
            prev = self.transitions[-1]
            if prev.done:
                raise MdpError("episode already ended; call start_episode() first")
            if prev.s_next != t.s:
                raise MdpError(f"episode chaining broken: s_next={prev.s_next} but s={t.s}")
        self.transitions.append(t)

    def add_episode(self, transitions: Iterable[Transition]) -> None:
        self.start_episode()
        for t in transitions:
            self.add(t)

    def episode_bounds(self) -> list[tuple[int, int]]:
        starts = [s for s in self.episode_starts if s < len(self.transitions)]
        ends = starts[1:] + [len(self.transitions)]
        return list(zip(starts, ends))

    def sample(self, m: int, rng: np.random.Generator) -> list[Transition]:
        return buffer_sample(self, m, rng)

    def as_arrays(self) -> dict[str, np.ndarray]:
        """Column arrays plus ``episode_end[i]``, the exclusive end of record i's episode."""
        n = len(self.transitions)
        episode_end = np.empty(n, dtype=np.int64)
        for start, end in self.episode_bounds():
            episode_end[start:end] = end
        return {
            "s": np.fromiter((t.s for t in self.transitions), np.int64, n),
            "a": np.fromiter((t.a for t in self.transitions), np.int64, n),
            "r": np.fromiter((t.r for t in self.transitions), np.float64, n),
            "s_next": np.fromiter((t.s_next for t in self.transitions), np.int64, n),
            "done": np.fromiter((t.done for t in self.transitions), np.bool_, n),
            "episode_end": episode_end,
        }


def buffer_sample(buffer: ReplayBuffer, m: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform sampling with replacement."""
    if len(buffer) == 0:
        raise MdpError("cannot sample from an empty buffer")
    if m < 1:
        raise ValueError("m must be >= 1")
    idx = rng.integers(0, len(buffer), size=m)
    return [buffer.transitions[i] for i in idx]


# -- plain-text serialization ---------------------------------------------
#
# MDP file:
#   # compositeq-mdp v1
#   num_states <int>
#   num_actions <int>
#   gamma <float>
#   initial <int>
#   terminal <int> <int> ...
#   <s> <a> <prob> <next_s> <reward_prob> <reward_value>     (one per reward atom)
# Consecutive atom lines of one (s, a) belong to the same branch until their
# reward probabilities reach 1; the following line opens a new branch.
#
# Buffer file:
#   # compositeq-buffer v1
#   episode
#   <s> <a> <r> <s_next> <done 0|1>
#   ...


def dumps_mdp(mdp: TabularMdp) -> str:
    out = io.StringIO()
    out.write(f"{MDP_FORMAT_HEADER}\n")
    out.write(f"num_states {mdp.num_states}\nnum_actions {mdp.num_actions}\n")
    out.write(f"gamma {mdp.gamma!r}\ninitial {mdp.initial_state}\n")
    out.write("terminal" + "".join(f" {t}" for t in sorted(mdp.terminal)) + "\n")
    for (s, a) in sorted(mdp.outcomes):
        for b in mdp.outcomes[(s, a)]:
            for p, v in b.reward.atoms:
                out.write(f"{s} {a} {b.prob!r} {b.next_state} {p!r} {v!r}\n")
    return out.getvalue()


def loads_mdp(text: str) -> TabularMdp:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MDP_FORMAT_HEADER:
        raise MdpError("missing or unsupported MDP format header")
    header: dict[str, list[str]] = {}
    body = []
    for ln in lines[1:]:
        if ln.startswith("#"):
            continue
        key, *rest = ln.split()
        if key in ("num_states", "num_actions", "gamma", "initial", "terminal"):
            header[key] = rest
        else:
            body.append(ln.split())
    try:
        num_states = int(header["num_states"][0])
        num_actions = int(header["num_actions"][0])
        gamma = float(header["gamma"][0])
        initial = int(header["initial"][0])
        terminal = frozenset(int(t) for t in header.get("terminal", []))
    except (KeyError, IndexError) as exc:
        raise MdpError(f"incomplete MDP header: {exc}") from exc

    pending: dict[tuple[int, int], list[Branch]] = {}
    open_branch: tuple[tuple[int, int], float, int, list[tuple[float, float]]] | None = None

    def close(ob):
        (sa, prob, nxt, atoms) = ob
        pending.setdefault(sa, []).append(Branch(prob, nxt, RewardDist(tuple(atoms))))

    for fields in body:
        if len(fields) != 6:
            raise MdpError(f"expected 6 fields per branch line, got {fields}")
        s, a, prob, nxt, rp, rv = fields
        sa, prob, nxt = (int(s), int(a)), float(prob), int(nxt)
        if open_branch is not None and open_branch[0] != sa:
            raise MdpError(f"branch of {open_branch[0]} ends before its reward mass reaches 1")
        if open_branch is None:
            open_branch = (sa, prob, nxt, [])
        elif (open_branch[1], open_branch[2]) != (prob, nxt):
            raise MdpError(f"branch of {sa} ends before its reward mass reaches 1")
        open_branch[3].append((float(rp), float(rv)))
        if abs(math.fsum(p for p, _ in open_branch[3]) - 1.0) <= PROB_TOL:
            close(open_branch)
            open_branch = None
    if open_branch is not None:
        raise MdpError("trailing branch with incomplete reward distribution")
    outcomes = {sa: tuple(bs) for sa, bs in pending.items()}
    return TabularMdp(num_states, num_actions, outcomes, terminal, initial, gamma)


def dumps_buffer(buffer: ReplayBuffer) -> str:
    out = io.StringIO()
    out.write(f"{BUFFER_FORMAT_HEADER}\n")
    for start, end in buffer.episode_bounds():
        out.write("episode\n")
        for t in buffer.transitions[start:end]:
            out.write(f"{t.s} {t.a} {t.r!r} {t.s_next} {int(t.done)}\n")
    return out.getvalue()


def loads_buffer(text: str) -> ReplayBuffer:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != BUFFER_FORMAT_HEADER:
        raise MdpError("missing or unsupported buffer format header")
    buf = ReplayBuffer()
    for ln in lines[1:]:
        if ln == "episode":
            buf.start_episode()
            continue
        s, a, r, s_next, done = ln.split()
        buf.add(Transition(int(s), int(a), float(r), int(s_next), done == "1"))
    return buf


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(dumps_mdp(mdp))


def load_mdp(path: str | Path) -> TabularMdp:
    return loads_mdp(Path(path).read_text())
