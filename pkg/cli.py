"""
beamtrain command line: seeded Monte-Carlo sweeps, ablations and self-checks.
Env (or .env next to this file): BEAMTRAIN_SEED, BEAMTRAIN_THREADS, BEAMTRAIN_OUT_DIR, BEAMTRAIN_LOG_LEVEL.
Run: python cli.py sweep-snr --trials 20 --threads 8  →  runs/sweep-snr/report.csv
Exit codes: 0 ok, 1 config error, 2 more than 10% of trials failed (or a self-check failed).
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

try:
    from dotenv import load_dotenv
    import pathlib
    env_path = pathlib.Path(__file__).resolve().parent / ".env"
    load_dotenv(dotenv_path=env_path)
except ImportError:
    pass

import pandas as pd

from beamtrain.harness import (
    invariant_checks, persist, run_sweep, sparsity_report, trace_trial, write_traces,
)
from beamtrain.settings import AXES, ConfigError, env_defaults, load_config

log = logging.getLogger("beamtrain.cli")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
FAILURE_LIMIT = 0.10
ABLATION_METHODS = ("lse_sparta", "lse_sparta_no_rician", "lse_sparta_laplace")
SWEEPS = {"sweep-snr": "snr", "sweep-paths": "paths", "sweep-distance": "distance"}


# ── Helpers ──

def _config(args):
    return load_config(args.config, full_scale=args.full_scale,
                       overrides={"seed": args.seed, "trials": args.trials})


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(env_defaults()["out_dir"]) / args.command


def _threads(args) -> int:
    return args.threads if args.threads is not None else env_defaults()["threads"]


def _finish_sweep(report, args) -> int:
    paths = persist(report, _out_dir(args), per_trial=args.per_trial, plot_data=args.plot_data)
    with pd.option_context("display.width", 120, "display.max_rows", 200):
        print(report.table.to_string(index=False))
    print(f"report: {paths['report']}")
    if report.failure_rate > FAILURE_LIMIT:
        print(f"{report.failures} of {len(report.trials)} trials failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ── Commands ──

def cmd_sweep(args) -> int:
    cfg = _config(args).with_axis(SWEEPS[args.command])
    log.info("%s sweep: %d points x %d methods x %d trials, seed %d",
             cfg.axis, len(cfg.axis_values), len(cfg.methods), cfg.trials, cfg.seed)
    return _finish_sweep(run_sweep(cfg, threads=_threads(args)), args)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    cfg = cfg.with_axis(args.axis or cfg.axis).with_methods(ABLATION_METHODS)
    return _finish_sweep(run_sweep(cfg, threads=_threads(args)), args)


def cmd_sparsity(args) -> int:
    cfg = _config(args)
    result = sparsity_report(cfg.array, cfg.prior, args.samples, cfg.seed)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sparsity.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"E[K] closed form: {result['expected_k']:.4f}")
    print(f"E[K] Monte-Carlo: {result['monte_carlo_k']:.4f} ({args.samples} samples)")
    print(f"relative gap:     {result['relative_gap']:.3%}")
    return EXIT_OK


def cmd_validate(args) -> int:
    seed = args.seed if args.seed is not None else env_defaults()["seed"]
    results = invariant_checks(seed)
    frame = pd.DataFrame([asdict(r) for r in results])
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "validate.csv", index=False)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<24} {r.value:.3g} (limit {r.threshold:.3g}) {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _config(args)
    if args.axis:
        cfg = cfg.with_axis(args.axis)
    value = args.axis_value if args.axis_value is not None else cfg.axis_values[0]
    if cfg.axis == "paths":
        value = int(value)
    result, detail = trace_trial(cfg, value, args.trial, method=args.method)
    paths = write_traces(detail, _out_dir(args))
    print(f"{result.method} @ {cfg.axis}={value} trial {args.trial}: rho={result.rho:.4f} "
          f"support={result.support_size} stage1={result.stage1_steps} stage2_iters={result.stage2_iters}")
    print(f"traces: {paths['stage1']}, {paths['stage2']}")
    return EXIT_OK


# ── Parser ──

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (default BEAMTRAIN_SEED)")
    common.add_argument("--trials", type=int, help="Monte-Carlo trials per axis point")
    common.add_argument("--out", help="output directory (default BEAMTRAIN_OUT_DIR/<command>)")
    common.add_argument("--threads", type=int, help="worker processes (default BEAMTRAIN_THREADS)")
    common.add_argument("--full-scale", action="store_true", help="128x16 array, 500 trials")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sweep_opts = argparse.ArgumentParser(add_help=False)
    sweep_opts.add_argument("--per-trial", action="store_true", help="also write trials.csv")
    sweep_opts.add_argument("--plot-data", action="store_true", help="also write plot_data.csv")

    parser = argparse.ArgumentParser(prog="beamtrain", description="Near-field two-stage beam training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, axis in SWEEPS.items():
        p = sub.add_parser(name, parents=[common, sweep_opts], help=f"sweep the {axis} axis")
        p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", parents=[common, sweep_opts], help="kernel and Rician-denoising ablation")
    p.add_argument("--axis", choices=AXES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sparsity", parents=[common], help="expected beamspace sparsity, closed form vs Monte-Carlo")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("validate", parents=[common], help="numeric self-checks")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("trace", parents=[common], help="one seeded trial with Stage I/II traces")
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--axis-value", type=float)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--method", default="lse_sparta", choices=ABLATION_METHODS)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = "DEBUG" if args.verbose else env_defaults()["log_level"]
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format="[%(name)s] %(message)s")
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
