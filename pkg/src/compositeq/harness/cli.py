"""``cq`` command line: run one experiment kind from a config file."""
from __future__ import annotations

import argparse
import logging
import sys

from compositeq.deep.agents import NumericalDivergence
from compositeq.harness import config as config_mod
from compositeq.harness import experiments
from compositeq.oracle import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("cq")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cq", description="Composite Q-learning experiments.")
    p.add_argument("kind", choices=config_mod.KINDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="run only this seed")
    p.add_argument("--out", default=None, help="output directory (beats CQ_OUT and the file)")
    return p


def run(kind: str, cfg: dict) -> None:
    if kind == "oracle":
        print(experiments.run_oracle(cfg))
    elif kind == "tabular":
        print(experiments.run_tabular(cfg))
    elif kind == "deep":
        print(experiments.run_deep_experiment(cfg))
    elif kind == "sweep":
        paths, summary = experiments.run_sweep(cfg)
        for cell, value in summary:
            print(f"{cell}\tauc={value:.6g}")
        print(paths[-1])
    else:
        path, text = experiments.run_report(cfg)
        sys.stdout.write(text)
        print(path)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        cfg = config_mod.load(args.kind, args.config, args.seed, args.out)
        run(args.kind, cfg)
    except config_mod.ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DivergenceError, NumericalDivergence) as e:
        log.error("numerical divergence: %s", e)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
