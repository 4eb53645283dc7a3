"""Command line: run, compare, validate, trace.

Exit codes: 0 ok, 1 scenario validation error, 2 invariant violation during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import RunResult, compare, run
from .metrics import plans_csv, reports_csv, trace_csv
from .netsim import FRAMEWORKS
from .scenario import CONTROL_MODES, Scenario, ScenarioError, canonical_scenario, load
from .sim import InvariantViolation

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2
BUILTIN = "canonical"

log = logging.getLogger("fedtwin")


def parse_seeds(text: str) -> list[int]:
    """'1..5' -> [1, 2, 3, 4, 5]; '1,3,7' and mixes like '1..3,9' are accepted."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo_i, hi_i + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def load_scenario(args) -> Scenario:
    """Scenario from --scenario (a JSON file, or the built-in name 'canonical') plus overrides."""
    sc = canonical_scenario() if args.scenario == BUILTIN else load(args.scenario)
    changes = {}
    for name, field_name in (("framework", "topology"), ("density", "density"), ("control", "control"),
                             ("duration", "duration"), ("seed", "seed")):
        value = getattr(args, name, None)
        if value is not None:
            changes[field_name] = value
    if changes:
        sc = sc.replace(**changes)
    return sc.check()


def _scenario_args(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--scenario", required=True, help=f"scenario JSON file, or '{BUILTIN}' for the built-in one")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--framework", choices=FRAMEWORKS, default=None, help="override the topology")
    p.add_argument("--density", default=None, help="override the density config name")
    p.add_argument("--control", choices=CONTROL_MODES, default=None, help="override the control mode")
    p.add_argument("--duration", type=float, default=None, help="override the duration in seconds")


def _write_run(res: RunResult, out: Path, stem: str = "report") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(res.report.to_json() + "\n")
    (out / f"{stem}.csv").write_text(reports_csv([res.report]))
    if res.plan_log:
        (out / f"{stem}_plans.csv").write_text(plans_csv(res.plan_log))
    if res.trace is not None:
        (out / f"{stem}_trace.csv").write_text(trace_csv(res.trace))
        with open(out / f"{stem}_snapshots.jsonl", "w") as fh:
            for snap in res.snapshots:
                fh.write(json.dumps(snap, sort_keys=True) + "\n")


def _summary(res: RunResult) -> str:
    r = res.report
    return (f"{r.framework} seed={r.seed} density={r.density} control={r.control}: "
            f"AVE-DL {r.delay_local.ave:.2f} ms, MAX-DL {r.delay_local.max:.2f} ms, JIT-DL {r.delay_local.jit:.2f} ms, "
            f"AVE-RA {r.accuracy.ave:.2f} %, vehicle flow {r.vehicle_flow:.2f}/min, "
            f"pedestrian flow {r.pedestrian_flow:.2f}/min, syncs {r.syncs} ({res.runtime:.1f} s)")


def _violations(res: RunResult) -> list[str]:
    out = list(res.report.invariant_violations)
    if any(res.privacy.values()):
        out.append(f"privacy audit found raw data on edge->cloud links: {res.privacy}")
    return out


def cmd_run(args) -> int:
    sc = load_scenario(args)
    res = run(sc, record_trace=True, keep_trace=args.trace, check_dead_reckoning=args.check_dead_reckoning)
    _write_run(res, Path(args.out))
    print(_summary(res))
    bad = _violations(res)
    for v in bad:
        print(f"invariant violation: {v}", file=sys.stderr)
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_compare(args) -> int:
    sc = load_scenario(args)
    frameworks = [f.strip() for f in args.frameworks.split(",") if f.strip()]
    for fw in frameworks:
        if fw not in FRAMEWORKS:
            raise ScenarioError([f"--frameworks: unknown framework {fw!r}"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bad: list[str] = []

    def runner(s: Scenario):
        res = run(s, record_trace=True)
        _write_run(res, out, f"{s.topology}_seed{s.seed}")
        print(_summary(res), flush=True)
        bad.extend(_violations(res))
        return res.report

    cmp = compare(sc, frameworks, args.seeds, runner=runner)
    reports = [cmp.reports[fw][s] for fw in cmp.frameworks for s in cmp.seeds]
    (out / "comparison.csv").write_text(reports_csv(reports))
    table = cmp.table()
    (out / "comparison.txt").write_text(table + "\n")
    print(table)
    for v in bad:
        print(f"invariant violation: {v}", file=sys.stderr)
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_validate(args) -> int:
    sc = load_scenario(args)
    print(f"{args.scenario}: ok ({sc.name}, {len(sc.map.intersections)} intersections, "
          f"{len(sc.sensors)} sensors, {len(sc.edges)} edges)")
    return EXIT_OK


def cmd_trace(args) -> int:
    sc = load_scenario(args)
    wanted = {e.strip() for e in args.events.split(",") if e.strip()} if args.events else None
    res = run(sc, record_trace=True, keep_trace=True)
    rows = res.trace if wanted is None else [r for r in res.trace if r.event in wanted or r.kind in wanted]
    text = trace_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(rows)} trace rows written to {args.out}")
    else:
        sys.stdout.write(text)
    bad = _violations(res)
    for v in bad:
        print(f"invariant violation: {v}", file=sys.stderr)
    return EXIT_INVARIANT if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedtwin", description="Federated traffic digital twin simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and seed")
    _scenario_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trace", action="store_true", help="also write the event trace and sync snapshots")
    p.add_argument("--check-dead-reckoning", action="store_true",
                   help="measure twin-vs-truth extrapolation error every tick")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare frameworks over several seeds")
    _scenario_args(p, seed=False)
    p.add_argument("--frameworks", default=",".join(FRAMEWORKS))
    p.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..5"), help="e.g. 1..5 or 1,2,3")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a scenario file")
    _scenario_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("trace", help="run and dump selected trace rows as CSV")
    _scenario_args(p)
    p.add_argument("--events", default="", help="comma-separated event names or message kinds (default: all)")
    p.add_argument("--out", default=None, help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as e:
        for err in e.errors:
            print(f"invalid scenario: {err}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
