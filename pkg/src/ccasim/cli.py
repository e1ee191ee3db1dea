"""Command-line entry point: ``ccasim run|list|calibrate|compare|verify``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from ccasim import bench
from ccasim.costs import REFERENCE_MEASUREMENTS, CostWeights, calibrate, load_measurements
from ccasim.errors import CcaSimError, InvalidParams
from ccasim.gpt import build_table, reference_layout
from ccasim.units import parse_size

EXIT_OK, EXIT_SIM_ERROR, EXIT_BAD_PARAMS = 0, 1, 2


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccasim", description="CCA-on-non-RME simulator and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run benchmark scenarios")
    run.add_argument("--scenario", default="all", help="scenario id or 'all'")
    run.add_argument("--profile", default="rk3588", help="board profile name or JSON path")
    run.add_argument("--backend", choices=bench.BACKENDS, default=None)
    run.add_argument("--ram", default=None, help="guest RAM size, e.g. 256M or 1G")
    run.add_argument("--iterations", type=int, default=None)
    run.add_argument("--seed", type=_seed, default=0)
    run.add_argument("--out", default=None, help="write output here instead of stdout")
    run.add_argument("--format", choices=("table", "json", "csv"), default="table")
    run.add_argument("--weights", default=None, help="weight table JSON")
    run.add_argument("--noise", action="store_true", help="apply the seeded measurement-noise overlay")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--rounds", type=int, default=1000, help="fp_timer_demo trace repetitions")
    run.add_argument("--no-fp-timer-fix", dest="fp_timer_fix", action="store_false")
    run.add_argument("--no-fwb-maintenance", dest="fwb_maintenance", action="store_false")

    sub.add_parser("list", help="list scenario ids")

    cal = sub.add_parser("calibrate", help="solve a weight table from measurements")
    cal.add_argument("--from", dest="source", default=None, help="measurement JSON (defaults to the built-in rows)")
    cal.add_argument("--out", default=None)

    cmp_ = sub.add_parser("compare", help="percentage overheads between two result sets")
    cmp_.add_argument("base", nargs="?", help="JSON rows from 'run --format json'")
    cmp_.add_argument("other", nargs="?")
    cmp_.add_argument("--format", choices=("table", "json"), default="table")
    cmp_.add_argument("--out", default=None)

    ver = sub.add_parser("verify", help="run the acceptance checks")
    ver.add_argument("--only", default=None, help="comma-separated criterion numbers")
    return parser


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    ram = parse_size(args.ram) if args.ram is not None else None
    if args.jobs < 1:
        raise InvalidParams("--jobs must be at least 1")
    try:
        weights = CostWeights.load(args.weights) if args.weights else None
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidParams(f"cannot read weights from {args.weights}: {exc}") from exc
    scenarios = bench.expand(
        args.scenario, args.backend, ram, iterations=args.iterations, profile=args.profile,
        fwb_maintenance=args.fwb_maintenance, fp_timer_fix=args.fp_timer_fix, seed=args.seed,
        noise=args.noise, rounds=args.rounds)
    if not scenarios:
        raise InvalidParams("no scenario matches the requested backend")
    rows = bench.run_all(scenarios, weights, jobs=args.jobs)
    _write(bench.emit_table(rows, args.format), args.out)
    return EXIT_OK


def cmd_list(args) -> int:
    for sid, schema in bench.SCHEMAS.items():
        print(f"{sid:<18} {schema.description} [backends: {', '.join(schema.backends)}]")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if args.source:
        try:
            rows = load_measurements(json.loads(Path(args.source).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise InvalidParams(f"cannot read measurements from {args.source}: {exc}") from exc
    else:
        rows = list(REFERENCE_MEASUREMENTS)
    result = calibrate(rows, shadow_table_bytes=build_table(reference_layout()).byte_size)
    _write(result.weights.dumps(), args.out)
    for key, res in sorted(result.residuals.items(), key=lambda kv: str(kv[0])):
        print(f"residual {key}: instr {float(res.instr):+.0f} cycles {float(res.cycles):+.0f}", file=sys.stderr)
    for name in result.clamped:
        print(f"clamped to zero: {name}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    if (args.base is None) != (args.other is None):
        raise InvalidParams("compare takes two result files or none")
    if args.base is None:
        base = bench.run_all(bench.expand("rmi_delegate", "single") + bench.expand("cvm_boot", "single"))
        other = bench.run_all(bench.expand("rmi_delegate", "two-gpt") + bench.expand("cvm_boot", "two-gpt"))
    else:
        try:
            base = bench.rows_from_json(Path(args.base).read_text())
            other = bench.rows_from_json(Path(args.other).read_text())
        except (OSError, ValueError, TypeError) as exc:
            raise InvalidParams(f"cannot read result rows: {exc}") from exc
    _write(bench.emit_overheads(bench.compare(base, other), args.format), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from ccasim import acceptance

    only = None
    if args.only:
        try:
            only = [int(x) for x in args.only.split(",")]
        except ValueError:
            raise InvalidParams(f"bad --only list {args.only!r}") from None
    results = acceptance.run_all(only)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_SIM_ERROR


COMMANDS = {"run": cmd_run, "list": cmd_list, "calibrate": cmd_calibrate, "compare": cmd_compare,
            "verify": cmd_verify}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InvalidParams as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_PARAMS
    except CcaSimError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM_ERROR


if __name__ == "__main__":
    sys.exit(main())
