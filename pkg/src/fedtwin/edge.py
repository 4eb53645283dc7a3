"""Edge-side twin maintenance: perception output -> traffic code -> local twin.

An :class:`EdgeNode` owns one region's local twin.  Each processed frame runs
fuse -> encode -> dedupe -> compile -> execute and yields the program that is also
forwarded upstream.  The same class serves as the cloud-hosted region processor of the
terminal-server baseline (with on-site learning switched off).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .control import DemandEstimate
from .semantics import (
    AGENT_CLASSES,
    SemanticRecord,
    Tolerances,
    TrafficProgram,
    TwinState,
    compile_records,
    dedupe,
    encode,
    execute,
    remember,
)
from .sensing import Detection, FusionError, fuse_all
from .world import PEDESTRIAN, VEHICLE, Layout, heading_vector

LocalTwinState = TwinState

WALKING_MIN_SPEED = 0.5  # m/s; slower pedestrian samples are treated as standing
WALKING_MAX_SPEED = 3.0  # m/s; faster "pedestrians" are misclassified vehicles or runners


@dataclass(frozen=True)
class LocalParamEstimate:
    region: str
    name: str
    value: float
    n: int
    window: float = 60.0


class StreamingMean:
    """Running mean with a sample count (Welford-free: sums are exact enough here)."""

    __slots__ = ("n", "total")

    def __init__(self):
        self.n = 0
        self.total = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        self.total += x

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else math.nan


def estimate_params(samples: Mapping[str, Sequence[float]], region: str = "",
                    window: float = 60.0) -> list[LocalParamEstimate]:
    """Mean and count per parameter; parameters with no samples are omitted."""
    out = []
    for name in sorted(samples):
        values = samples[name]
        if not values:
            continue
        acc = StreamingMean()
        for v in values:
            acc.add(v)
        out.append(LocalParamEstimate(region, name, acc.mean, acc.n, window))
    return out


def extrapolate(twin: TwinState, t: float) -> TwinState:
    """Dead-reckoned view of `twin` at time t (constant velocity along the stored heading)."""
    view = twin.copy()
    for e in view.entities.values():
        if e.cls not in AGENT_CLASSES:
            continue
        gap = t - e.last_update
        if gap < -1e-9:
            raise ValueError(f"cannot extrapolate {e.id} backwards ({t} < {e.last_update})")
        if gap > 0 and e.speed > 0:
            dx, dy = heading_vector(e.heading)
            e.position = (e.position[0] + e.speed * gap * dx, e.position[1] + e.speed * gap * dy)
    return view


def dead_reckoning_bound(gap: float, v_max: float, a_max: float) -> float:
    return v_max * gap + 0.5 * a_max * gap * gap


@dataclass
class Sighting:
    cls: str
    position: tuple[float, float]
    heading: float
    time: float


class EdgeNode:
    """Local twin plus the per-frame semantic pipeline for one region."""

    def __init__(self, region: str, intersections: Sequence[str] = (), layout: Layout | None = None,
                 tolerances: Tolerances = Tolerances(), stale_timeout: float = 2.0,
                 emit_spawn: bool = True):
        self.region = region
        self.intersections = list(intersections)
        self.layout = layout
        self.tolerances = tolerances
        self.stale_timeout = stale_timeout
        self.emit_spawn = emit_spawn
        self.twin = TwinState(region)
        self.memory: dict[str, SemanticRecord] = {}  # last emitted record per id
        self.last_seen: dict[str, float] = {}
        self.dropped = 0
        self.global_params: dict[str, float] = {}
        # window statistics
        self._first: dict[str, Sighting] = {}
        self._speeds: dict[str, StreamingMean] = {}
        self._window_ids: set[str] = set()

    # -- per frame ----------------------------------------------------------------------------

    def tick(self, detections: Iterable[Detection], t: float,
             signals: Mapping[str, str] | None = None, weather: str | None = None) -> TrafficProgram:
        """Run one frame through the pipeline and apply the result to the local twin."""
        good = []
        for d in detections:
            if d.timestamp > t + 1e-9 or not d.speed >= 0 or not all(map(math.isfinite, d.position)):
                self.dropped += 1
                continue
            if d.timestamp != t:  # an older frame's detection: fuse it as of this frame
                d = Detection(d.sensor, d.true_id, d.cls, d.position, d.speed, d.heading, t,
                              d.correct, d.position_sigma, d.speed_sigma)
            good.append(d)
        try:
            estimates = fuse_all(good)
        except FusionError:
            self.dropped += len(good)
            estimates = []
        records = encode(estimates, t)
        for e in estimates:
            self.last_seen[e.id] = t
            self._observe(e, t)
        if signals:
            for iid in sorted(signals):
                records.append(SemanticRecord("signal", iid, {"phase": signals[iid]}, t))
        if weather is not None:
            records.append(SemanticRecord("weather", "weather", {"condition": weather}, t))
        seen = {r.id for r in records}
        for eid in sorted(self.twin.entities):
            ent = self.twin.entities[eid]
            if ent.cls in AGENT_CLASSES and eid not in seen and t - self.last_seen.get(eid, ent.last_update) > self.stale_timeout:
                records.append(SemanticRecord(ent.cls, eid, {}, t, removed=True))
        emitted = dedupe(records, self.memory, self.tolerances)
        remember(self.memory, emitted)
        known = {k: e.cls for k, e in self.twin.entities.items()} if self.emit_spawn else None
        program = compile_records(emitted, known=known, region=self.region, timestamp=t)
        execute(program, self.twin)
        for r in emitted:
            if r.removed:
                self.last_seen.pop(r.id, None)
        return program

    def _observe(self, e, t: float) -> None:
        if e.id not in self._first:
            self._first[e.id] = Sighting(e.cls, e.position, e.heading, t)
        self._window_ids.add(e.id)
        if e.speed >= WALKING_MIN_SPEED:
            self._speeds.setdefault(e.id, StreamingMean()).add(e.speed)

    # -- per window -----------------------------------------------------------------------------

    def arrivals(self, start: float, end: float) -> list[tuple[str, Sighting]]:
        return sorted(((k, s) for k, s in self._first.items() if start < s.time <= end), key=lambda kv: (kv[1].time, kv[0]))

    def demand(self, start: float, end: float) -> dict[str, DemandEstimate]:
        """Per-intersection demand from twin arrivals first seen in (start, end]."""
        if self.layout is None:
            raise ValueError("demand attribution needs the region's map layout")
        window = end - start
        counts_v: dict[str, dict[str, int]] = {i: {} for i in self.intersections}
        counts_p: dict[str, dict[str, int]] = {i: {} for i in self.intersections}
        for _, s in self.arrivals(start, end):
            if s.cls == VEHICLE:
                aid = self._nearest_approach(s)
                if aid is not None:
                    iid = self.layout.approach_intersection[aid]
                    counts_v[iid][aid] = counts_v[iid].get(aid, 0) + 1
            elif s.cls == PEDESTRIAN:
                cid = self._nearest_crosswalk(s)
                if cid is not None:
                    iid = self.layout.crosswalk_intersection[cid]
                    counts_p[iid][cid] = counts_p[iid].get(cid, 0) + 1
        out = {}
        for iid in self.intersections:
            out[iid] = DemandEstimate(
                iid,
                {a: n * 60.0 / window for a, n in sorted(counts_v[iid].items())},
                {c: n * 60.0 / window for c, n in sorted(counts_p[iid].items())},
                self.global_params.get("walking_speed", 1.2),
                window,
            )
        return out

    def _nearest_intersection(self, pos) -> str | None:
        best, best_d = None, math.inf
        for iid in self.intersections:
            x, y = self.layout.spec.intersection(iid).position
            d = math.hypot(pos[0] - x, pos[1] - y)
            if d < best_d:
                best, best_d = iid, d
        return best

    def _nearest_approach(self, s: Sighting) -> str | None:
        iid = self._nearest_intersection(s.position)
        if iid is None:
            return None
        best, best_d = None, math.inf
        for a in self.layout.spec.intersection(iid).approaches:
            d = abs(a.heading - s.heading) % 360.0
            d = min(d, 360.0 - d)
            if d < best_d:
                best, best_d = a.id, d
        return best

    def _nearest_crosswalk(self, s: Sighting) -> str | None:
        best, best_d = None, math.inf
        for iid in self.intersections:
            for cw in self.layout.spec.crosswalks_of(iid):
                x, y = self.layout.crosswalk_center(cw.id)
                d = math.hypot(s.position[0] - x, s.position[1] - y)
                if d < best_d:
                    best, best_d = cw.id, d
        return best

    def window_params(self, start: float, end: float) -> list[LocalParamEstimate]:
        """Close a flow window: behavioural parameter estimates plus per-intersection vehicle flow."""
        walking, walking_sq, cruising = [], [], []
        for eid in sorted(self._window_ids):
            acc = self._speeds.get(eid)
            if acc is None or acc.n == 0:
                continue
            cls = self.memory[eid].cls if eid in self.memory else self._first[eid].cls
            if cls == PEDESTRIAN:
                if acc.mean > WALKING_MAX_SPEED:
                    continue
                walking.append(acc.mean)
                walking_sq.append(acc.mean * acc.mean)
            elif cls == VEHICLE:
                cruising.append(acc.mean)
        window = end - start
        out = estimate_params(
            {"walking_speed": walking, "walking_speed_sq": walking_sq, "cruise_speed": cruising},
            self.region, window,
        )
        if self.layout is not None:
            arrivals = self.arrivals(start, end)
            for iid, dem in self.demand(start, end).items():
                n = sum(1 for _, s in arrivals if s.cls == VEHICLE
                        and self._nearest_intersection(s.position) == iid)
                out.append(LocalParamEstimate(self.region, f"vehicle_flow:{iid}",
                                              sum(dem.vehicle_flow.values()), n, window))
                n = round(sum(dem.pedestrian_flow.values()) * window / 60.0)
                out.append(LocalParamEstimate(self.region, f"pedestrian_flow:{iid}",
                                              sum(dem.pedestrian_flow.values()), n, window))
        self._speeds = {k: v for k, v in self._speeds.items() if k in self.twin.entities}
        self._first = {k: v for k, v in self._first.items() if k in self.twin.entities or v.time > end}
        self._window_ids = set()
        return out

    def apply_global_params(self, params: Mapping[str, float]) -> None:
        """Overwrite the node's copy of the federated parameters."""
        self.global_params = dict(params)
        for e in self.twin.entities.values():
            if e.cls == PEDESTRIAN and "walking_speed" in params:
                e.params["walking_speed"] = params["walking_speed"]
            elif e.cls == VEHICLE and "cruise_speed" in params:
                e.params["desired_speed"] = params["cruise_speed"]


def edge_tick(node: EdgeNode, detections: Iterable[Detection], t: float) -> tuple[TrafficProgram, TwinState]:
    program = node.tick(detections, t)
    return program, node.twin
