"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 run failure, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from delaystream.runner import ConfigError, apply_seed_override, parse_config, run_plan, write_report
from delaystream.stream import GeneratorSpec, StreamConfig, StreamConfigError, open_stream, write_stream_csv

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_SELFTEST = 0, 1, 2, 3

GEN_VARIANTS = {"rotating": "rotating_gaussians", "abrupt": "abrupt_shift", "burst": "label_burst"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="delaystream", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="execute an experiment plan")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--overwrite", action="store_true", help="rerun runs whose results already exist")
    run.add_argument("--output-dir", help="override the plan's output_dir")
    run.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    gen = sub.add_parser("gen", help="write a synthetic stream as CSV")
    gen.add_argument("variant", choices=sorted(GEN_VARIANTS))
    gen.add_argument("--steps", type=int, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--validation-fraction", type=float, default=0.0)
    defaults = GeneratorSpec()
    gen.add_argument("--classes", type=int, default=defaults.num_classes)
    gen.add_argument("--dim", type=int, default=defaults.dim)
    gen.add_argument("--noise", type=float, default=defaults.noise)
    gen.add_argument("--radius", type=float, default=defaults.radius)
    gen.add_argument("--omega", type=float, default=defaults.omega)
    gen.add_argument("--shift-step", type=int, default=defaults.shift_step)
    gen.add_argument("--shift", type=float, default=defaults.shift)
    gen.add_argument("--burst-length", type=int, default=defaults.burst_length)
    gen.add_argument("-o", "--output", required=True)

    report = sub.add_parser("report", help="recompute gap and recovery tables from stored summaries")
    report.add_argument("output_dir")

    sub.add_parser("selftest", help="gradient checks and sampler chi-square test")
    return parser


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _cmd_run(args) -> int:
    try:
        plan = apply_seed_override(parse_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    result = run_plan(plan, workers=args.workers, overwrite=args.overwrite, output_dir=args.output_dir)
    for s in result.stats:
        print(f"{s['method']:<24} d={s['d']:<4} C={s['C']:<3} acc={s['final_acc_mean']:.4f} +- {s['final_acc_std']:.4f} ({s['runs']} runs)")
    if result.failures:
        for f in result.failures:
            print(f"run {f['run_id']} failed: {f['error']}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _cmd_gen(args) -> int:
    spec = GeneratorSpec(
        variant=GEN_VARIANTS[args.variant],
        num_classes=args.classes,
        dim=args.dim,
        noise=args.noise,
        radius=args.radius,
        omega=args.omega,
        shift_step=args.shift_step,
        shift=args.shift,
        burst_length=args.burst_length,
    )
    try:
        handle = open_stream(
            StreamConfig(
                n=args.n,
                d=0,
                horizon=args.steps,
                generator=spec,
                seed=args.seed,
                validation_fraction=args.validation_fraction,
            )
        )
    except StreamConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_stream_csv(args.output, handle)
    return EXIT_OK


def _cmd_report(args) -> int:
    fields_, table = write_report(args.output_dir)
    if not table:
        print(f"no successful runs under {args.output_dir}", file=sys.stderr)
        return EXIT_RUN
    print("  ".join(f"{f:>10}" for f in fields_))
    for row in table:
        print("  ".join(f"{_fmt(row[f]):>10}" for f in fields_))
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from delaystream.selftest import run_selftest

    ok = True
    for name, passed, detail in run_selftest():
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "gen": _cmd_gen, "report": _cmd_report, "selftest": _cmd_selftest}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
