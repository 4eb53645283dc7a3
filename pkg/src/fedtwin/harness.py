"""Experiment runner: single runs, world-only flow runs, and framework comparisons."""

from __future__ import annotations

import hashlib
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .control import fixed_plan
from .metrics import MetricsReport, trace_csv
from .netsim import FRAMEWORKS, TraceRow, audit_privacy, cloud_inbox_kinds
from .scenario import Scenario, ScenarioError
from .sim import InvariantViolation, Simulation
from .world import PEDESTRIAN, VEHICLE, FlowLog, Layout, flow_counts, initial_world, spawn_traffic, step


@dataclass
class RunResult:
    report: MetricsReport
    trace_digest: str = ""
    privacy: dict = field(default_factory=dict)
    cloud_kinds: set = field(default_factory=set)
    trace: list[TraceRow] | None = None
    runtime: float = 0.0
    plan_violations: list[str] = field(default_factory=list)
    plan_log: list = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.report.invariant_violations


def run(scenario: Scenario, record_trace: bool = False, keep_trace: bool = False,
        check_dead_reckoning: bool = False) -> RunResult:
    """Run one (scenario, seed).  With `record_trace` the trace is audited for privacy and
    hashed; it is returned only when `keep_trace` is set (traces are large)."""
    t0 = time.perf_counter()
    sim = Simulation(scenario, record_trace=record_trace or keep_trace, check_dead_reckoning=check_dead_reckoning)
    report = sim.run()
    res = RunResult(report, plan_violations=list(sim.plan_violations), plan_log=list(sim.plan_log))
    if record_trace or keep_trace:
        res.trace_digest = hashlib.sha256(trace_csv(sim.trace).encode()).hexdigest()
        res.privacy = audit_privacy(sim.trace)
        res.cloud_kinds = cloud_inbox_kinds(sim.trace)
        if keep_trace:
            res.trace = sim.trace
            res.snapshots = sim.snapshots
    res.runtime = time.perf_counter() - t0
    return res


def world_flows(scenario: Scenario) -> dict[str, dict[str, float]]:
    """Flows of a fixed-plan run computed from the ground-truth world alone.

    Under fixed control nothing downstream of the sensors feeds back into the world, so this
    equals the flows of the full pipeline for the same seed (tested), at a fraction of the cost.
    """
    errors = scenario.validate()
    if errors:
        raise ScenarioError(errors)
    if scenario.control != "fixed":
        raise ValueError("world-only flows are defined for fixed control only")
    sc = scenario
    layout = Layout(sc.map)
    plans = {i.id: fixed_plan(i, sc.map.crosswalks_of(i.id), sc.constraints) for i in sc.map.intersections}
    world = initial_world(layout, plans, sc.tick_rate, {VEHICLE: sc.vehicle_model, PEDESTRIAN: sc.pedestrian_model})
    rng = random.Random(f"{sc.seed}/world")
    log = FlowLog(layout.intersection_ids)
    n = int(round(sc.duration * sc.tick_rate))
    for k in range(n + 1):
        t = k / sc.tick_rate
        if k > 0:
            world = step(world, plans)
            log.record(world.events)
        world = spawn_traffic(sc.densities[sc.density_at(t)], world, rng)
    out = {}
    for iid in layout.intersection_ids:
        v, p = flow_counts(log, iid, sc.duration, end=sc.duration)
        out[iid] = {"vehicle": v, "pedestrian": p}
    return out


# -- comparison ------------------------------------------------------------------------------------

ORDERED_LOWER = ("delay_local.ave", "delay_local.max", "delay_local.jit")
ORDERED_HIGHER = ("accuracy.ave",)


def metric(report: MetricsReport, path: str) -> float:
    obj = report
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


@dataclass
class Comparison:
    frameworks: list[str]
    seeds: list[int]
    reports: dict[str, dict[int, MetricsReport]]
    flags: list[str] = field(default_factory=list)

    def mean(self, framework: str, path: str) -> float:
        vals = [metric(self.reports[framework][s], path) for s in self.seeds]
        return math.fsum(vals) / len(vals)

    def rows(self) -> list[dict]:
        paths = ("delay_local.ave", "delay_local.max", "delay_local.min", "delay_local.jit",
                 "delay_global.ave", "accuracy.ave", "accuracy.max", "accuracy.min", "accuracy.jit",
                 "vehicle_flow", "pedestrian_flow")
        out = []
        for fw in self.frameworks:
            for s in self.seeds:
                r = self.reports[fw][s]
                out.append({"framework": fw, "seed": s, **{p: metric(r, p) for p in paths}})
            out.append({"framework": fw, "seed": "mean", **{p: self.mean(fw, p) for p in paths}})
        return out

    def table(self) -> str:
        rows = self.rows()
        cols = list(rows[0])
        width = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols}
        lines = ["  ".join(c.rjust(width[c]) for c in cols)]
        for r in rows:
            lines.append("  ".join(_fmt(r[c]).rjust(width[c]) for c in cols))
        if self.flags:
            lines.append("ordering flags:")
            lines.extend(f"  {f}" for f in self.flags)
        return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def compare(scenario: Scenario, frameworks: Sequence[str] = FRAMEWORKS, seeds: Sequence[int] = (1, 2, 3, 4, 5),
            runner: Callable[[Scenario], MetricsReport] | None = None) -> Comparison:
    """Run every (framework, seed) pair and flag where svfdt fails to beat terminal-server."""
    if len(seeds) < 3:
        raise ValueError("compare needs at least 3 seeds")
    for fw in frameworks:
        if fw not in FRAMEWORKS:
            raise ValueError(f"unknown framework {fw!r}")
    runner = runner or (lambda sc: run(sc).report)
    reports = {fw: {s: runner(scenario.replace(topology=fw, seed=s)) for s in seeds} for fw in frameworks}
    cmp = Comparison(list(frameworks), list(seeds), reports)
    if "svfdt" in frameworks and "terminal-server" in frameworks:
        for p in ORDERED_LOWER:
            if not cmp.mean("svfdt", p) < cmp.mean("terminal-server", p):
                cmp.flags.append(f"{p}: svfdt mean not below terminal-server")
        for p in ORDERED_HIGHER:
            if not cmp.mean("svfdt", p) > cmp.mean("terminal-server", p):
                cmp.flags.append(f"{p}: svfdt mean not above terminal-server")
    return cmp


__all__ = ["Comparison", "InvariantViolation", "RunResult", "compare", "run", "world_flows"]
