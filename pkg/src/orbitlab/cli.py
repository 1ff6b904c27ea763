"""Command-line front end: ``orbitlab run | builtins | check``."""

from __future__ import annotations

import argparse
import json
import sys

from .builtins import list_builtins
from .errors import ScenarioError
from .scenario import BUILTIN_SCENARIOS, builtin_scenario, load, run_scenario, validate

EXIT_FAIL = 1
EXIT_SCHEMA = 2


def _cmd_run(args) -> int:
    try:
        doc = load(args.scenario)
        errors = validate(doc)
        if errors:
            for e in errors:
                print(f"schema error: {e}", file=sys.stderr)
            return EXIT_SCHEMA
    except ScenarioError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    out = args.out or doc.get("outputs", {}).get("dir")
    if any(t["task"] == "chart" for t in doc["tasks"]):
        print("note: span agreement is sampled at chart images only; "
              "sampling a Euclidean box around x0 would be unsound", file=sys.stderr)
    bundle = run_scenario(doc, out, args.seed)
    for t in bundle.tasks:
        line = f"{t.verdict.upper():5s} {t.name} ({t.task})"
        if t.verdict == "error":
            line += f": {t.metrics.get('message', '')}"
        print(line)
    print(f"overall: {bundle.verdict}" + (f"  report: {out}/report.json" if out else ""))
    if args.json:
        sys.stdout.write(bundle.dumps())
    return bundle.exit_code


def _cmd_builtins(args) -> int:
    if args.dump:
        try:
            doc = builtin_scenario(args.dump)
        except ScenarioError as exc:
            print(exc, file=sys.stderr)
            return EXIT_SCHEMA
        print(json.dumps(doc, indent=2))
        return 0
    width = max(len(name) for name, _ in list_builtins())
    for name, desc in list_builtins():
        tag = " [scenario]" if name in BUILTIN_SCENARIOS else ""
        print(f"{name:{width}s}  {desc}{tag}")
    return 0


def _cmd_check(args) -> int:
    try:
        errors = validate(load(args.scenario))
    except ScenarioError as exc:
        errors = [exc]
    for e in errors:
        print(f"schema error: {e}", file=sys.stderr)
    if errors:
        return EXIT_SCHEMA
    print("ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbitlab", description="Audits for orbits of Lipschitz vector fields.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file or built-in scenario")
    run.add_argument("scenario", help="path to scenario JSON or the name of a built-in scenario")
    run.add_argument("--out", help="directory for report.json and CSV series")
    run.add_argument("--seed", type=int, help="replace the scenario-level seed")
    run.add_argument("--json", action="store_true", help="also print the report JSON to stdout")
    run.set_defaults(fn=_cmd_run)
    bl = sub.add_parser("builtins", help="list built-in families")
    bl.add_argument("--dump", metavar="NAME", help="print the built-in scenario NAME as JSON")
    bl.set_defaults(fn=_cmd_builtins)
    chk = sub.add_parser("check", help="validate a scenario against the schema")
    chk.add_argument("scenario")
    chk.set_defaults(fn=_cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
