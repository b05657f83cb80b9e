"""Seeded experiment runners writing long-format metric CSVs."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from compositeq import oracle
from compositeq.chains import make_chain
from compositeq.deep.agents import Td3Config
from compositeq.deep.train import DeepRunConfig, run_deep, save_checkpoint
from compositeq.harness.config import GRID_AXES, ConfigError
from compositeq.mdp import save_mdp
from compositeq.runs import LearnerSpec, auc, convergence_step, run_learner, welch_test

HEADER = ("run_id", "seed", "step", "metric", "value")


class MetricWriter:
    """Append-only ``run_id,seed,step,metric,value`` CSV, flushed after every write."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(HEADER)
        self._fh.flush()

    def write(self, run_id: str, seed: int, rows: Iterable[tuple[int, str, float]]) -> None:
        for step, metric, value in rows:
            self._csv.writerow((run_id, seed, int(step), metric, repr(float(value))))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> dict[tuple[str, int], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """``{(run_id, seed): {metric: (steps, values)}}`` from a metric CSV."""
    raw: dict = defaultdict(lambda: defaultdict(lambda: ([], [])))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != HEADER:
            raise ValueError(f"{path}: not a metric CSV")
        for run_id, seed, step, metric, value in reader:
            steps, values = raw[(run_id, int(seed))][metric]
            steps.append(int(step))
            values.append(float(value))
    return {k: {m: (np.array(s), np.array(v)) for m, (s, v) in d.items()} for k, d in raw.items()}


def _csv_path(cfg: dict[str, Any], suffix: str = "") -> Path:
    return Path(cfg["output_dir"]) / f"{cfg['run_id']}{suffix}.csv"


# -- oracle ------------------------------------------------------------------------


def run_oracle(cfg: dict[str, Any]) -> Path:
    """Exact values for the configured chain.

    The metric CSV holds Q*, the head oracles at ``(s0, a)`` and the
    reassembly residual max|T_n + S_n - Q*| over non-terminal states;
    ``<run_id>_tables.csv`` lists every table as ``table,s,a,value``.
    """
    mdp = _chain(cfg)
    q = oracle.value_iteration(mdp, tol=cfg["tol"])
    pi = oracle.greedy_policy(q)
    trunc = oracle.truncated_oracle(mdp, pi, cfg["n"])
    shift = oracle.shifted_oracle(mdp, pi, q, cfg["n"])
    live = mdp.nonterminal_states
    rows = []
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            rows.append((0, f"q_star_s{s}_a{a}", q[s, a]))
    for i in range(cfg["n"]):
        rows.append((0, f"trunc_{i + 1}_s0_a", trunc[i][mdp.initial_state, 0]))
        rows.append((0, f"shift_{i + 1}_s0_a", shift[i][mdp.initial_state, 0]))
    residual = np.max(np.abs(trunc[-1][live] + shift[-1][live] - q[live]))
    rows.append((0, "identity_residual", residual))
    path = _csv_path(cfg)
    with MetricWriter(path) as w:
        for seed in cfg["seeds"]:
            w.write(cfg["run_id"], seed, rows)
    tables = [("q_star", q)] + [(f"trunc_{i + 1}", x) for i, x in enumerate(trunc)]
    tables += [(f"shift_{i + 1}", x) for i, x in enumerate(shift)]
    with open(_csv_path(cfg, "_tables"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("table", "s", "a", "value"))
        for name, table in tables:
            for s in range(mdp.num_states):
                for a in range(mdp.num_actions):
                    out.writerow((name, s, a, repr(float(table[s, a]))))
    if cfg["write_mdp"]:
        save_mdp(mdp, Path(cfg["output_dir"]) / f"{cfg['run_id']}.mdp")
    return path


# -- tabular -----------------------------------------------------------------------


def learner_spec(cfg: dict[str, Any]) -> LearnerSpec:
    try:
        return LearnerSpec(cfg["learner"], n=cfg["n"], alpha_q=cfg["alpha_q"],
                           alpha_tr=cfg["alpha_tr"], alpha_sh=cfg["alpha_sh"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _chain(cfg: dict[str, Any]):
    try:
        return make_chain(cfg["env"], cfg["K"], cfg["gamma"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _tabular_seed(cfg: dict[str, Any], mdp, spec: LearnerSpec, seed: int, writer: MetricWriter,
                  run_id: str):
    names = spec.metric_names()

    def flush(steps, rows):
        writer.write(run_id, seed, ((st, name, row[j])
                                    for st, row in zip(steps, rows) for j, name in enumerate(names)))

    return run_learner(
        mdp, spec, seed, cfg["update_budget"], cfg["checkpoint_every"],
        mode=cfg["mode"], episodes=cfg["episodes"], nonoptimal_frac=cfg["nonoptimal_frac"],
        behavior=cfg["behavior"], epsilon=cfg["epsilon"], on_checkpoints=flush,
        stop_on_settle=cfg["stop_on_settle"])


def run_tabular(cfg: dict[str, Any]) -> Path:
    mdp = _chain(cfg)
    spec = learner_spec(cfg)
    path = _csv_path(cfg)
    with MetricWriter(path) as w:
        for seed in cfg["seeds"]:
            _tabular_seed(cfg, mdp, spec, seed, w, cfg["run_id"])
    return path


# -- deep --------------------------------------------------------------------------


def deep_config(cfg: dict[str, Any]) -> DeepRunConfig:
    td3_keys = Td3Config.keys()
    td3 = Td3Config(**{k: (tuple(cfg[k]) if k == "actor_hidden" else cfg[k]) for k in td3_keys})
    fields = {f.name for f in dataclasses.fields(DeepRunConfig)} - {"td3"}
    return DeepRunConfig(**{k: cfg[k] for k in fields}, td3=td3)


def run_deep_experiment(cfg: dict[str, Any]) -> Path:
    try:
        run_cfg = deep_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    path = _csv_path(cfg)
    with MetricWriter(path) as w:
        for seed in cfg["seeds"]:
            res = run_deep(run_cfg, seed, lambda rows, s=seed: w.write(cfg["run_id"], s, rows))
            if cfg["save_checkpoints"]:
                save_checkpoint(res.agent, Path(cfg["output_dir"]) / "checkpoints",
                                f"{cfg['run_id']}_seed{seed}")
    return path


# -- sweep -------------------------------------------------------------------------


def grid_cells(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    axes = [(a, cfg[f"grid_{a}"]) for a in GRID_AXES if cfg[f"grid_{a}"]]
    return [dict(zip([a for a, _ in axes], combo))
            for combo in itertools.product(*(v for _, v in axes))]


def _cell_id(cell: dict[str, Any]) -> str:
    return "_".join(f"{k}={v}" for k, v in cell.items())


def run_sweep(cfg: dict[str, Any]) -> tuple[list[Path], list[tuple[str, float]]]:
    """One CSV per grid cell plus ``<run_id>_auc.csv`` holding each cell's mean AUC.

    Tabular cells score ``greedy_optimal`` (fraction of the run spent optimal),
    deep cells score ``eval_return``.
    """
    base = cfg["base"]
    if base == "tabular" and (cfg["grid_beta_tr"] or cfg["grid_beta_sh"] or cfg["grid_grad_steps"]):
        raise ConfigError("grid_beta_* and grid_grad_steps apply only to base = deep")
    paths, summary = [], []
    for cell in grid_cells(cfg):
        sub = {**cfg, **cell, "run_id": f"{cfg['run_id']}_{_cell_id(cell)}"}
        if base == "tabular":
            path = run_tabular(sub)
            metric = "greedy_optimal"
        else:
            path = run_deep_experiment(sub)
            metric = "eval_return"
        data = read_metrics(path)
        scores = [auc(*series[metric]) for series in data.values()]
        summary.append((_cell_id(cell), float(np.mean(scores))))
        paths.append(path)
    summary_path = _csv_path(cfg, "_auc")
    with MetricWriter(summary_path) as w:
        for cell_id, value in summary:
            w.write(f"{cfg['run_id']}_{cell_id}", -1, [(0, "auc", value)])
    return paths + [summary_path], summary


# -- report ------------------------------------------------------------------------


@dataclasses.dataclass
class SpeedupRow:
    label: str
    baseline_steps: list[int | None]
    candidate_steps: list[int | None]

    @property
    def per_seed(self) -> list[float | None]:
        return [None if b is None or c is None else 1.0 - c / b
                for b, c in zip(self.baseline_steps, self.candidate_steps)]

    @property
    def mean(self) -> float | None:
        vals = self.per_seed
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))


def _convergence_by_seed(path: str | Path) -> dict[int, int | None]:
    out = {}
    for (_, seed), series in sorted(read_metrics(path).items(), key=lambda kv: kv[0][1]):
        if "greedy_optimal" not in series:
            raise ConfigError(f"{path}: no greedy_optimal metric")
        out[seed] = convergence_step(*series["greedy_optimal"])
    return out


def report_speedup(baselines, candidates, labels=None) -> list[SpeedupRow]:
    """Per-pair convergence-step speedup ``1 - steps_candidate / steps_baseline``, matched by seed."""
    labels = labels or [str(i) for i in range(len(baselines))]
    rows = []
    for label, b, c in zip(labels, baselines, candidates):
        cb, cc = _convergence_by_seed(b), _convergence_by_seed(c)
        seeds = sorted(set(cb) & set(cc))
        if not seeds:
            raise ConfigError(f"{b} and {c} share no seeds")
        rows.append(SpeedupRow(label, [cb[s] for s in seeds], [cc[s] for s in seeds]))
    return rows


def _pct(x: float | None) -> str:
    return "n/c" if x is None else f"{100 * x:.1f}%"


def format_speedup(rows: list[SpeedupRow]) -> str:
    lines = ["label\tmean_speedup\tper_seed"]
    for r in rows:
        lines.append(f"{r.label}\t{_pct(r.mean)}\t{' '.join(_pct(v) for v in r.per_seed)}")
    return "\n".join(lines) + "\n"


def report_auc(baselines, candidates, labels=None, metric: str = "eval_return") -> str:
    """Mean per-seed AUC of each CSV pair with a Welch test on the per-seed values."""
    labels = labels or [str(i) for i in range(len(baselines))]
    lines = ["label\tbaseline_auc\tcandidate_auc\twelch_p"]
    for label, b, c in zip(labels, baselines, candidates):
        scores = []
        for path in (b, c):
            data = read_metrics(path)
            try:
                scores.append([auc(*series[metric]) for series in data.values()])
            except KeyError:
                raise ConfigError(f"{path}: no {metric} metric") from None
        _, p = welch_test(*scores)
        lines.append(f"{label}\t{np.mean(scores[0]):.6g}\t{np.mean(scores[1]):.6g}\t{p:.3g}")
    return "\n".join(lines) + "\n"


def run_report(cfg: dict[str, Any]) -> tuple[Path, str]:
    try:
        if cfg["report"] == "speedup":
            rows = report_speedup(cfg["baseline"], cfg["candidate"], cfg["labels"])
            text = format_speedup(rows)
            if any(v is None for r in rows for v in r.per_seed):
                warnings.warn("some runs did not converge; their entries are marked n/c")
        else:
            text = report_auc(cfg["baseline"], cfg["candidate"], cfg["labels"], cfg["metric"])
    except (OSError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    path = Path(cfg["output_dir"]) / f"{cfg['run_id']}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path, text
