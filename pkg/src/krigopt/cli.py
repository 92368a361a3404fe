"""Command-line interface: run, suggest, demo, psi.

Exit codes: 0 normal termination, 2 configuration error, 3 evaluator
failure (partial run log stays on disk).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .acquisition import GaussianMinProblem, gaussian_min_bounds, gaussian_min_mc
from .config import parse_config
from .demos import SCENARIOS, run_demo
from .errors import ConfigError, EvaluatorFailure, KrigoptError
from .optimizer import propose, run_ego, wire_for_tag
from .runlog import RunLogWriter, measurement_from_json, summary_record

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVALUATOR = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="krigopt",
        description="Kriging-based global optimization with generalized observations",
    )
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a full optimization run")
    run.add_argument("--config", required=True, help="path to the JSON run config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--samples", type=int, default=None, help="override mc_samples")
    run.add_argument("--out", default="runlog.jsonl", help="run-log path")

    sug = sub.add_parser("suggest", help="print the next measurement set")
    sug.add_argument("--config", required=True)
    sug.add_argument("--seed", type=int, default=None)
    sug.add_argument("--samples", type=int, default=None)
    sug.add_argument(
        "--state",
        default=None,
        help="JSONL file of past measurements ({location, operator, value} records)",
    )

    demo = sub.add_parser("demo", help="run a builtin scenario with plot outputs")
    demo.add_argument("scenario", choices=SCENARIOS)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--samples", type=int, default=None)
    demo.add_argument("--out", default=None, help="output directory")
    demo.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    psi = sub.add_parser(
        "psi", help="expected minimum of a Gaussian vector read from a file"
    )
    psi.add_argument(
        "--config",
        required=True,
        help='JSON file {"mu": [...], "sigma": [[...]], "clamp": optional}',
    )
    psi.add_argument("--samples", type=int, default=20000)
    psi.add_argument("--seed", type=int, default=0)

    # accept --quiet after the subcommand as well; the suppressed default
    # keeps the subparser from clobbering the global flag's parsed value
    for sp in (run, sug, demo, psi):
        sp.add_argument(
            "--quiet",
            action="store_true",
            default=argparse.SUPPRESS,
            help=argparse.SUPPRESS,
        )
    return p


def _apply_overrides(setup, args):
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "samples", None) is not None:
        changes["mc_samples"] = args.samples
    if changes:
        setup.ego = dataclasses.replace(setup.ego, **changes)
    return setup


def _cmd_run(args) -> int:
    setup = _apply_overrides(parse_config(args.config), args)
    evaluator = setup.evaluator_factory()
    with RunLogWriter(args.out) as writer:
        writer.record({"type": "config", "config": setup.raw, "seed": setup.ego.seed})
        try:
            result = run_ego(evaluator, setup.ego, writer=writer)
        except EvaluatorFailure as exc:
            print(f"evaluator failure: {exc}", file=sys.stderr)
            if exc.payload is not None:
                print(f"offending payload: {exc.payload}", file=sys.stderr)
            return EXIT_EVALUATOR
        finally:
            evaluator.close()
        writer.record(summary_record(result, setup.ego))
    if not args.quiet:
        best = "none" if result.best is None else f"{result.best.value:.6g} at {result.best.location.tolist()}"
        print(f"done: {result.n_evals} evaluations, best {best}, log {args.out}")
    return EXIT_OK


def _load_state(path):
    if path is None:
        return []
    data = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                data.append(measurement_from_json(json.loads(line)))
    return data


def _cmd_suggest(args) -> int:
    setup = _apply_overrides(parse_config(args.config), args)
    data = _load_state(args.state)
    step = propose(setup.ego, data)
    for loc, ops in step["proposals"]:
        print(
            json.dumps(
                {
                    "location": [float(v) for v in loc],
                    "operators": [wire_for_tag(setup.ego, t) for t in ops],
                }
            )
        )
    return EXIT_OK


def _cmd_demo(args) -> int:
    out = args.out or f"demo_{args.scenario}"
    run_demo(
        args.scenario,
        out,
        seed=args.seed,
        mc_samples=args.samples,
        figures=not args.no_figures,
        quiet=args.quiet,
    )
    return EXIT_OK


def _cmd_psi(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"malformed problem file: {exc.msg} at line {exc.lineno} column {exc.colno}"
            ) from exc
    extra = set(obj) - {"mu", "sigma", "clamp"}
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)}; allowed: mu, sigma, clamp")
    if "mu" not in obj or "sigma" not in obj:
        raise ConfigError("problem file requires 'mu' and 'sigma'")
    problem = GaussianMinProblem(
        np.asarray(obj["mu"], dtype=float),
        np.asarray(obj["sigma"], dtype=float),
        None if obj.get("clamp") is None else float(obj["clamp"]),
    )
    est = gaussian_min_mc(problem, args.samples, seed=args.seed)
    lower, upper = gaussian_min_bounds(problem)
    print(
        json.dumps(
            {
                "value": est.value,
                "stderr": est.stderr,
                "n_samples": est.n_samples,
                "lower_bound": lower,
                "upper_bound": upper,
            }
        )
    )
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.quiet:
        import warnings

        warnings.filterwarnings("ignore", message="measurement set duplicates")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "suggest":
            return _cmd_suggest(args)
        if args.command == "demo":
            return _cmd_demo(args)
        if args.command == "psi":
            return _cmd_psi(args)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluatorFailure as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except KrigoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
