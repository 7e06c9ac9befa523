"""Command-line entry point: ``dualskin <verb> [--config F] [--out D] [--seed N] [--quick]``.

Exit status: 0 on success, 2 for invalid input, 3 when a numerical
routine fails (non-convergence, singular systems, inverted elements).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import scenarios
from .camera import UndistortError
from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .fem import ConvergenceError as FemConvergenceError
from .fem import DatasetGenerationError, InvertedElementError, NoContactError
from .mesh import DegenerateGeometryError
from .proximity import RankDeficientError
from .tactile import ConvergenceError as LsqConvergenceError
from .tactile import SingularSystemError

__all__ = ["main", "EXIT_OK", "EXIT_INVALID", "EXIT_NUMERICAL"]

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("dualskin")

_VERBS = {
    "mesh": (None, scenarios.run_mesh_export, "export the skin mesh, markers and cameras"),
    "dataset": ("dataset_gen", scenarios.run_dataset_gen, "generate FEM indentation records"),
    "train": (None, scenarios.run_train, "fit the ridge estimator on simulated records"),
    "indent": ("indentation_sweep", scenarios.run_indentation_sweep,
               "contact-depth accuracy over an indentation grid"),
    "distance": ("distance_sweep", scenarios.run_distance_sweep,
                 "closest-distance accuracy over an obstacle sweep"),
    "cycle": ("mode_cycle", scenarios.run_mode_cycle, "scripted tactile/proximity mode timeline"),
}

_NUMERICAL = (FemConvergenceError, LsqConvergenceError, SingularSystemError, RankDeficientError,
              InvertedElementError, NoContactError, UndistortError, np.linalg.LinAlgError,
              FloatingPointError)


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualskin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, metavar="verb")
    for name, (_, _, helptext) in _VERBS.items():
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="scenario configuration file")
        sp.add_argument("--out", help="output directory (overrides scenario.output)")
        sp.add_argument("--seed", type=_seed, help="unsigned 64-bit seed (overrides config)")
        sp.add_argument("--quick", action="store_true", help="reduced desk-scale grids")
    return p


def _resolve(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    kind = _VERBS[args.verb][0]
    if kind is not None:
        cfg = cfg.replace(scenario=kind)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out:
        cfg = cfg.replace(output=args.out)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"dualskin: {exc}", file=sys.stderr)
        return EXIT_INVALID
    runner = _VERBS[args.verb][1]
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "config_used.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    try:
        log.info("running %s into %s", args.verb, cfg.output)
        path = runner(cfg, cfg.output, args.quick)
    except DatasetGenerationError as exc:
        print(f"dualskin: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _NUMERICAL as exc:
        print(f"dualskin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DegenerateGeometryError, ValueError) as exc:
        print(f"dualskin: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
