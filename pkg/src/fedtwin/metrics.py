"""Run statistics: mirroring delay, recognition accuracy, flows, traffic accounting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .netsim import TRACE_COLUMNS, TraceRow

REPORT_VERSION = "report_v1"


def compute_jitter(samples: Sequence[float]) -> float:
    """Population standard deviation; 0.0 when fewer than two samples (see Stat.defined)."""
    n = len(samples)
    if n < 2:
        return 0.0
    mean = math.fsum(samples) / n
    return math.sqrt(math.fsum((x - mean) ** 2 for x in samples) / n)


@dataclass
class Stat:
    ave: float = 0.0
    max: float = 0.0
    min: float = 0.0
    jit: float = 0.0
    spread: float = 0.0  # max - min
    n: int = 0
    defined: bool = False  # jitter needs at least two samples


def summarize(samples: Sequence[float], scale: float = 1.0, average: float | None = None) -> Stat:
    """AVE/MAX/MIN/JIT of `samples` times `scale`.  `average` overrides the mean (used for
    pooled ratios, which weight windows by their detection counts)."""
    if not samples:
        return Stat()
    xs = [x * scale for x in samples]
    ave = math.fsum(xs) / len(xs) if average is None else average * scale
    hi, lo = max(xs), min(xs)
    return Stat(ave, hi, lo, compute_jitter(xs), hi - lo, len(xs), len(xs) >= 2)


@dataclass
class MetricsReport:
    framework: str
    seed: int
    density: str
    control: str
    duration: float
    delay_local: Stat = field(default_factory=Stat)  # ms
    delay_global: Stat = field(default_factory=Stat)  # ms
    accuracy: Stat = field(default_factory=Stat)  # percent
    detections: int = 0
    flows: dict = field(default_factory=dict)  # intersection -> {"vehicle": per min, "pedestrian": per min}
    bytes: dict = field(default_factory=dict)  # "src->dst/Kind" -> bytes
    messages: dict = field(default_factory=dict)
    camera_frames: int = 0
    syncs: int = 0
    sync_reasons: dict = field(default_factory=dict)
    change_triggers: int = 0
    plans: int = 0
    plan_violations: int = 0
    dead_reckoning: dict = field(default_factory=dict)
    spawned: int = 0
    invariant_violations: list = field(default_factory=list)
    version: str = REPORT_VERSION

    @property
    def vehicle_flow(self) -> float:
        return sum(f["vehicle"] for f in self.flows.values())

    @property
    def pedestrian_flow(self) -> float:
        return sum(f["pedestrian"] for f in self.flows.values())

    def link_bytes(self, link_class: str, kinds: Iterable[str] | None = None) -> int:
        total = 0
        for key, b in self.bytes.items():
            lc, kind = key.split("/")
            if lc == link_class and (kinds is None or kind in kinds):
                total += b
        return total

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def flat(self) -> dict:
        """One-level dict for CSV output; column names are stable within REPORT_VERSION."""
        row = {"version": self.version, "framework": self.framework, "seed": self.seed, "density": self.density,
               "control": self.control, "duration": self.duration}
        for name in ("delay_local", "delay_global", "accuracy"):
            st = getattr(self, name)
            for k in ("ave", "max", "min", "jit", "spread", "n"):
                row[f"{name}_{k}"] = getattr(st, k)
        for iid in sorted(self.flows):
            row[f"flow_{iid}_vehicle"] = self.flows[iid]["vehicle"]
            row[f"flow_{iid}_pedestrian"] = self.flows[iid]["pedestrian"]
        for key in sorted(self.bytes):
            row[f"bytes_{key}"] = self.bytes[key]
        row.update(syncs=self.syncs, change_triggers=self.change_triggers, plans=self.plans,
                   plan_violations=self.plan_violations, detections=self.detections,
                   camera_frames=self.camera_frames, spawned=self.spawned,
                   invariant_violations=len(self.invariant_violations))
        return row

    def check(self) -> list[str]:
        """Internal consistency of the report itself."""
        problems = []
        for name in ("delay_local", "delay_global", "accuracy"):
            st = getattr(self, name)
            if st.n and not (st.min - 1e-9 <= st.ave <= st.max + 1e-9):
                problems.append(f"{name}: MIN <= AVE <= MAX violated")
            if st.jit < 0:
                problems.append(f"{name}: negative jitter")
        if self.accuracy.n and not (0.0 <= self.accuracy.min and self.accuracy.max <= 100.0):
            problems.append("accuracy outside [0, 100]")
        if self.delay_local.n and self.delay_local.min <= 0:
            problems.append("non-positive local delay sample")
        return problems


def reports_csv(reports: Sequence[MetricsReport]) -> str:
    rows = [r.flat() for r in reports]
    columns: list[str] = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def trace_csv(trace: Iterable[TraceRow], events: set[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        if events is None or r.event in events:
            w.writerow([repr(r.time), r.event, r.link, r.kind, r.bytes, repr(r.delay), r.msg, r.entity])
    return buf.getvalue()


@dataclass
class TraceSummary:
    delay_local: list[float]
    delay_global: list[float]
    bytes: dict[str, int]
    crossings: dict[str, dict[str, int]]
    syncs: int


def replay_trace(trace: Iterable[TraceRow]) -> TraceSummary:
    """Recompute delay samples, byte totals, crossings and syncs from trace rows alone."""
    spawn: dict[str, float] = {}
    local, glob = [], []
    by: dict[str, int] = {}
    crossings: dict[str, dict[str, int]] = {}
    syncs = 0
    for r in trace:
        if r.event == "spawn":
            spawn[r.entity] = r.time
        elif r.event == "reflect_local":
            local.append(r.time - spawn[r.entity])
        elif r.event == "reflect_global":
            glob.append(r.time - spawn[r.entity])
        elif r.event == "send":
            src, dst = r.link.split("->")
            key = f"{src.split(':')[0]}->{dst.split(':')[0]}/{r.kind}"
            by[key] = by.get(key, 0) + r.bytes
        elif r.event == "cross":
            c = crossings.setdefault(r.link, {"vehicle": 0, "pedestrian": 0})
            c[r.kind] += 1
        elif r.event == "sync":
            syncs += 1
    return TraceSummary(local, glob, by, crossings, syncs)


PLAN_COLUMNS = ("time", "intersection", "cycle", "phase", "movements", "green", "walk", "clearance", "infeasible")


def plans_csv(plan_log: Iterable[tuple[float, object]]) -> str:
    """One row per phase of every emitted signal plan."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_COLUMNS)
    for t, plan in plan_log:
        for i, ph in enumerate(plan.phases):
            w.writerow([repr(t), plan.intersection, repr(plan.cycle), i, " ".join(ph.movements),
                        repr(ph.green), repr(ph.walk), repr(ph.clearance), int(plan.infeasible)])
    return buf.getvalue()
