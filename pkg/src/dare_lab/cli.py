"""Command-line entry point.

    dare-lab run             --preset two_moons_paper --out results/moons
    dare-lab run             --config my.yaml --seeds 0,1,2 --out results/run
    dare-lab sweep-delta     --config sweep.yaml --out results/sweep
    dare-lab verify-waterfill --out results/wf
    dare-lab analyze-layers  --config analysis.yaml --out results/layers

Exit codes: 0 success, 2 configuration error, 3 member divergence,
4 verification tolerance breach. Worker count comes from --workers, then
the DARE_LAB_WORKERS environment variable, then 1.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DareError,
    DivergenceError,
    EnsembleTrainingError,
    IngestionError,
)
from .experiments import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_TOLERANCE,
    load_config,
    run_delta_sweep,
    run_experiment,
    run_layer_analysis,
    run_waterfill_verify,
)


def _parse_seeds(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(f"bad --seeds value {text!r}") from exc


def _resolve_workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("DARE_LAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigurationError(
                f"DARE_LAB_WORKERS must be an integer, got {env!r}"
            ) from exc
    return 1


def _add_common(parser, need_out=True):
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--preset", help="named configuration to start from")
    parser.add_argument("--out", required=need_out, help="output directory")
    parser.add_argument("--seeds", help="comma-separated seed list override")
    parser.add_argument("--workers", type=int, default=None,
                        help="concurrent member training processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dare-lab",
        description="anti-regularized ensemble experiments and verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="train and evaluate an experiment"))
    _add_common(sub.add_parser(
        "sweep-delta", help="threshold-slack ablation over a deltas list"
    ))

    wf = sub.add_parser("verify-waterfill",
                        help="closed-form budget allocation vs ascent oracle")
    _add_common(wf)
    wf.add_argument("--n-problems", type=int, default=100)
    wf.add_argument("--p-max", type=int, default=6)
    wf.add_argument("--seed", type=int, default=0)

    _add_common(sub.add_parser(
        "analyze-layers", help="rank layer components of a saved ensemble"
    ))
    return parser


def _overrides(args) -> dict:
    if args.seeds is None:
        return {}
    return {"seeds": _parse_seeds(args.seeds)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        workers = _resolve_workers(args)
        if args.command == "run":
            config = load_config(args.config, args.preset, _overrides(args))
            return run_experiment(config, args.out, workers)
        if args.command == "sweep-delta":
            config = load_config(args.config, args.preset, _overrides(args))
            return run_delta_sweep(config, args.out, workers)
        if args.command == "verify-waterfill":
            n_problems, p_max, seed = args.n_problems, args.p_max, args.seed
            if args.config or args.preset:
                config = load_config(args.config, args.preset, {})
                wf = config.get("waterfill", {})
                n_problems = int(wf.get("n_problems", n_problems))
                p_max = int(wf.get("p_max", p_max))
                seed = int(wf.get("seed", seed))
            return run_waterfill_verify(args.out, n_problems, p_max, seed)
        if args.command == "analyze-layers":
            config = load_config(args.config, args.preset, {})
            return run_layer_analysis(config, args.out)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (DivergenceError, EnsembleTrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
