"""Command-line interface: ``diffnet {sim,theory,compare,eno,bound}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .algorithms import DivergenceError, SpecError
from .config import ConfigError, ExperimentConfig
from .presets import PRESETS, preset
from .theory import TheoryError
from .topology import TopologyError

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="JSON experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--runs", type=_positive, help="override the number of Monte-Carlo runs")
    common.add_argument("--iters", type=_positive,
                        help="override the number of iterations (eno: the horizon in seconds)")
    common.add_argument("--out", metavar="PATH", help="output CSV (default: config 'out', else stdout)")
    common.add_argument("--threads", type=_positive, help=f"worker threads (default: ${harness.THREADS_ENV} or 1)")

    parser = argparse.ArgumentParser(prog="diffnet", description="Diffusion LMS simulation and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("sim", parents=[common], help="Monte-Carlo MSD traces")
    sub.add_parser("theory", parents=[common], help="theoretical MSD curves")
    sub.add_parser("compare", parents=[common], help="simulation and theory with a deviation report")
    eno = sub.add_parser("eno", parents=[common], help="energy-neutral operation run")
    eno.add_argument("--node-every", type=_positive, default=100, metavar="S",
                     help="node-trace sampling period in seconds (default 100)")
    sub.add_parser("bound", parents=[common], help="per-node step-size bounds")
    sub.add_parser("config", parents=[common], help="print the resolved config as JSON")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("give --config PATH or --preset NAME")
    iters = None if args.command == "eno" else args.iters
    return cfg.updated(seed=args.seed, runs=args.runs, iterations=iters, out=args.out)


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, newline="")


def _sidecar(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}_{suffix}{p.suffix or '.csv'}")


def _note(msg: str):
    print(msg, file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "config":
            _emit(cfg.to_json(), cfg.out)
            return EXIT_OK
        exp = harness.Experiment.from_config(cfg)
        return COMMANDS[args.command](exp, args)
    except DivergenceError as exc:
        _note(f"diffnet: {exc}")
        return EXIT_DIVERGED
    except (ConfigError, SpecError, TheoryError, TopologyError, ValueError) as exc:
        _note(f"diffnet: {exc}")
        return EXIT_CONFIG


def cmd_sim(exp, args) -> int:
    traces = harness.simulate(exp, args.threads)
    _emit(harness.msd_csv(traces, "sim"), exp.config.out)
    return EXIT_OK


def cmd_theory(exp, args) -> int:
    traces, skipped = harness.predict(exp, args.threads)
    for name in skipped:
        _note(f"diffnet: no mean-square model for {name}; skipped")
    _emit(harness.msd_csv(traces, "theory"), exp.config.out)
    return EXIT_OK


def cmd_compare(exp, args) -> int:
    theo, skipped = harness.predict(exp, args.threads)
    for name in skipped:
        _note(f"diffnet: no mean-square model for {name}; simulated only")
    sim = harness.simulate(exp, args.threads)
    _emit(harness.msd_csv(sim + theo, ["sim"] * len(sim) + ["theory"] * len(theo)), exp.config.out)
    for d in harness.deviations(sim, theo, exp.config.warmup):
        _note(f"{d.label}: max |sim - theory| after iteration {exp.config.warmup} = {d.max_abs_db:.3f} dB; "
              f"steady state sim {d.steady_sim_db:.3f} dB, theory {d.steady_theory_db:.3f} dB "
              f"(gap {d.steady_gap_db:+.3f} dB)")
    return EXIT_OK


def cmd_eno(exp, args) -> int:
    out = exp.config.out
    if out is None:
        raise ConfigError("eno writes several CSV files; give --out PATH")
    results = harness.run_eno(exp, args.threads, horizon=args.iters)
    _emit(harness.msd_csv([r.msd for r in results], "sim", index="time_s"), out)
    _emit(harness.sleep_csv(results), str(_sidecar(out, "sleep")))
    for r in results:
        _emit(harness.nodes_csv(r, args.node_every), str(_sidecar(out, f"nodes_{r.label}")))
    return EXIT_OK


def cmd_bound(exp, args) -> int:
    bounds, skipped = harness.step_bounds(exp)
    for name in skipped:
        _note(f"diffnet: no mean model for {name}; skipped")
    _emit(harness.bounds_csv(bounds), exp.config.out)
    return EXIT_OK


COMMANDS = {"sim": cmd_sim, "theory": cmd_theory, "compare": cmd_compare, "eno": cmd_eno, "bound": cmd_bound}

if __name__ == "__main__":
    sys.exit(main())
