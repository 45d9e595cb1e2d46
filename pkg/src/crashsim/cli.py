"""Command-line front end: single runs and axis sweeps.

Config files are JSON with the ExperimentSpec schema; flags override
config keys.  Exit status is 0 only if every run's result validated
against its oracle.
"""

import argparse
import json
import sys

from .harness import ExperimentSpec, report_json, run, sweep, sweep_csv


def _load_spec(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    overrides = {
        "workload": args.workload,
        "mode": args.mode,
        "cache_bytes": args.cache_bytes,
        "line_size": args.line_size,
        "associativity": args.associativity,
        "crash_label": args.crash_label,
        "crash_occurrence": args.crash_occurrence,
        "crash_op_count": args.crash_op_count,
        "seed": args.seed,
        "repetitions": args.repetitions,
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if args.param:
        params = data.setdefault("params", {})
        for item in args.param:
            key, _, raw = item.partition("=")
            if not raw:
                raise SystemExit(f"bad --param {item!r}, expected key=value")
            try:
                params[key] = json.loads(raw)
            except json.JSONDecodeError:
                params[key] = raw
    if "workload" not in data or "mode" not in data:
        raise SystemExit("workload and mode are required (config or flags)")
    return ExperimentSpec.from_dict(data)


def _add_spec_flags(p):
    p.add_argument("--config", help="JSON config file with the spec schema")
    p.add_argument("--workload", choices=("cg", "abft", "mc"))
    p.add_argument("--mode", choices=("native", "checkpoint", "algorithm"))
    p.add_argument("--cache-bytes", type=int, dest="cache_bytes")
    p.add_argument("--line-size", type=int, dest="line_size")
    p.add_argument("--associativity", type=int)
    p.add_argument("--crash-label", dest="crash_label")
    p.add_argument("--crash-occurrence", type=int, dest="crash_occurrence")
    p.add_argument("--crash-op-count", type=int, dest="crash_op_count")
    p.add_argument("--seed", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--param", action="append",
                   help="workload parameter override, key=value (repeatable)")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="crashsim",
        description="Crash-consistency lab: cache simulation with "
                    "algorithm-directed recovery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    _add_spec_flags(p_run)
    p_run.add_argument("--out", help="write the JSON report here")

    p_sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_spec_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=("cache_bytes", "problem_size", "crash_point"))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--out", help="write the CSV table here")

    args = parser.parse_args(argv)
    spec = _load_spec(args)

    if args.command == "run":
        report = run(spec)
        text = report_json(report)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        else:
            print(text)
        return 0 if report["result_valid"] else 1

    values = [int(v) for v in args.values.split(",") if v != ""]
    reports = sweep(spec, args.axis, values)
    table = sweep_csv(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0 if all(r["result_valid"] for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
