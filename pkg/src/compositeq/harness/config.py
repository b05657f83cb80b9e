"""Flat ``key = value`` run configs validated against a per-kind schema."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from compositeq.deep.agents import Td3Config

KINDS = ("oracle", "tabular", "deep", "sweep", "report")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: str  # int, float, str, bool, opt_float, int_list, float_list, str_list
    default: Any
    choices: tuple | None = None


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(key: str, spec: Key, text: str):
    try:
        if spec.type == "int":
            value = int(text)
        elif spec.type == "float":
            value = float(text)
        elif spec.type == "opt_float":
            value = None if text.lower() in ("none", "") else float(text)
        elif spec.type == "bool":
            value = _parse_bool(text)
        elif spec.type == "str":
            value = text
        elif spec.type.endswith("_list"):
            item = {"int_list": int, "float_list": float, "str_list": str}[spec.type]
            value = [item(x.strip()) for x in text.split(",") if x.strip()]
        else:
            raise AssertionError(spec.type)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} not one of {', '.join(map(str, spec.choices))}")
    return value


COMMON = {
    "run_id": Key("str", None),
    "seeds": Key("int_list", [0]),
    "output_dir": Key("str", "out"),
}

ENV = {
    "env": Key("str", "deterministic", ("deterministic", "stochastic", "probe")),
    "K": Key("int", 20),
    "gamma": Key("float", 1.0),
}

ORACLE = {
    "n": Key("int", 4),
    "tol": Key("float", 1e-10),
    "write_mdp": Key("bool", False),
}

TABULAR = {
    "learner": Key("str", "composite",
                   ("vanilla", "composite", "shifted", "nstep_onpolicy", "nstep_model", "td_delta")),
    "n": Key("int", 4),
    "alpha_q": Key("float", 1e-3),
    "alpha_tr": Key("float", 1e-3),
    "alpha_sh": Key("float", 1e-2),
    "mode": Key("str", "batch", ("batch", "online")),
    "episodes": Key("int", 1000),
    "nonoptimal_frac": Key("float", 0.1),
    "behavior": Key("str", "mixing", ("mixing", "eps_greedy")),
    "epsilon": Key("float", 0.1),
    "update_budget": Key("int", 1_000_000),
    "checkpoint_every": Key("int", 1000),
    "stop_on_settle": Key("bool", False),
}

_TD3_TYPES = {int: "int", float: "float", bool: "bool", str: "str"}
TD3 = {}
for _name, _default in Td3Config().__dict__.items():
    if _name == "actor_hidden":
        TD3[_name] = Key("int_list", list(_default))
    elif _name == "optimizer":
        TD3[_name] = Key("str", _default, ("adam", "sgd"))
    else:
        TD3[_name] = Key(_TD3_TYPES[type(_default)], _default)

DEEP = {
    "agent": Key("str", "composite_td3", ("td3", "composite_td3", "td3_delta")),
    "total_steps": Key("int", 50_000),
    "start_steps": Key("int", 1_000),
    "grad_steps": Key("int", 1),
    "eval_every": Key("int", 2_500),
    "eval_episodes": Key("int", 10),
    "reward_noise": Key("float", 0.0),
    "buffer_size": Key("int", 1_000_000),
    "alpha_sh_multistep": Key("opt_float", None),
    "stop_return": Key("opt_float", None),
    "save_checkpoints": Key("bool", False),
    **TD3,
}

GRID_AXES = ("n", "alpha_tr", "alpha_sh", "beta_tr", "beta_sh", "grad_steps")
SWEEP_BASE = {"base": Key("str", "tabular", ("tabular", "deep"))}
GRID = {f"grid_{a}": Key("int_list" if a in ("n", "grad_steps") else "float_list", [])
        for a in GRID_AXES}

REPORT = {
    "report": Key("str", "speedup", ("speedup", "auc")),
    "baseline": Key("str_list", []),
    "candidate": Key("str_list", []),
    "labels": Key("str_list", []),
    "metric": Key("str", "eval_return"),
}


def schema(kind: str, base: str | None = None) -> dict[str, Key]:
    if kind == "oracle":
        return {**COMMON, **ENV, **ORACLE}
    if kind == "tabular":
        return {**COMMON, **ENV, **TABULAR}
    if kind == "deep":
        return {**COMMON, **DEEP}
    if kind == "sweep":
        inner = schema(base or "tabular")
        return {**inner, **SWEEP_BASE, **GRID}
    if kind == "report":
        return {**COMMON, **REPORT}
    raise ConfigError(f"unknown experiment kind {kind!r}")


def parse_text(text: str) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment, blank lines are skipped."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build(kind: str, raw: dict[str, str]) -> dict[str, Any]:
    """Validate raw pairs for ``kind`` and fill defaults. Unknown keys are errors."""
    base = raw.get("base") if kind == "sweep" else None
    if base is not None and base not in ("tabular", "deep"):
        raise ConfigError(f"base: {base!r} not one of tabular, deep")
    keys = schema(kind, base)
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key(s) for {kind}: {', '.join(unknown)}")
    cfg = {k: (list(s.default) if isinstance(s.default, list) else s.default) for k, s in keys.items()}
    for k, v in raw.items():
        cfg[k] = _parse(k, keys[k], v)
    cfg["kind"] = kind
    if cfg["run_id"] is None:
        cfg["run_id"] = kind
    if not cfg["seeds"]:
        raise ConfigError("seeds: at least one seed required")
    _check(kind, cfg)
    return cfg


def _check(kind: str, cfg: dict[str, Any]) -> None:
    if "K" in cfg and cfg["env"] == "deterministic" and cfg["K"] < 6:
        raise ConfigError("K: deterministic chain needs K >= 6")
    if "K" in cfg and cfg["env"] == "stochastic" and cfg["K"] < 2:
        raise ConfigError("K: stochastic chain needs K >= 2")
    if "gamma" in cfg and not 0.0 <= cfg["gamma"] <= 1.0:
        raise ConfigError("gamma: must lie in [0, 1]")
    for k in ("update_budget", "checkpoint_every", "episodes", "n", "total_steps", "eval_every"):
        if k in cfg and cfg[k] < 1:
            raise ConfigError(f"{k}: must be >= 1")
    if kind == "report":
        if not cfg["baseline"] or len(cfg["baseline"]) != len(cfg["candidate"]):
            raise ConfigError("baseline and candidate must list the same number of CSV files")
        if cfg["labels"] and len(cfg["labels"]) != len(cfg["baseline"]):
            raise ConfigError("labels must match the number of CSV pairs")
    if kind == "sweep" and not any(cfg[f"grid_{a}"] for a in GRID_AXES):
        raise ConfigError("sweep needs at least one non-empty grid_* key")


def load(kind: str, path: str | Path, seed: int | None = None, out: str | None = None
         ) -> dict[str, Any]:
    """Read and validate a config file.

    Output directory precedence: ``out`` argument, then ``CQ_OUT``, then the file.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    cfg = build(kind, parse_text(text))
    if seed is not None:
        cfg["seeds"] = [seed]
    env_out = os.environ.get("CQ_OUT")
    if out is not None:
        cfg["output_dir"] = out
    elif env_out:
        cfg["output_dir"] = env_out
    return cfg
