"""Ground-truth microscopic traffic: vehicles, pedestrians and fixed-time signals at 30 Hz.

Vehicles are point masses on straight lane paths through an intersection; pedestrians walk
straight crosswalk segments.  Headings are compass degrees (0 = north, 90 = east), so a
heading h moves along (sin h, cos h).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

from .control import SignalPlan, phase_layout

VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"


class ConfigurationError(ValueError):
    pass


# -- map ---------------------------------------------------------------------------------


@dataclass
class Approach:
    id: str
    heading: float
    lane_count: int = 1
    road_width: float = 10.0
    crosswalk_width: float = 3.0


@dataclass
class Intersection:
    id: str
    position: tuple[float, float]
    approaches: list[Approach]


@dataclass
class Crosswalk:
    id: str
    approach: str  # the leg this crosswalk crosses


@dataclass
class MapSpec:
    intersections: list[Intersection]
    crosswalks: list[Crosswalk] = field(default_factory=list)

    def validate(self) -> list[str]:
        errors = []
        ids = [i.id for i in self.intersections]
        if len(set(ids)) != len(ids):
            errors.append("map.intersections: ids are not unique")
        approach_ids = []
        for i in self.intersections:
            for a in i.approaches:
                approach_ids.append(a.id)
                if a.road_width <= 0:
                    errors.append(f"map: approach {a.id} road_width must be > 0")
                if a.crosswalk_width <= 0:
                    errors.append(f"map: approach {a.id} crosswalk_width must be > 0")
                if a.lane_count < 1:
                    errors.append(f"map: approach {a.id} lane_count must be >= 1")
        if len(set(approach_ids)) != len(approach_ids):
            errors.append("map: approach ids are not unique")
        known = set(approach_ids)
        cw_ids = [c.id for c in self.crosswalks]
        if len(set(cw_ids)) != len(cw_ids):
            errors.append("map.crosswalks: ids are not unique")
        for c in self.crosswalks:
            if c.approach not in known:
                errors.append(f"map: crosswalk {c.id} references unknown approach {c.approach}")
        return errors

    def crosswalks_of(self, intersection_id: str) -> list[Crosswalk]:
        legs = {a.id for i in self.intersections if i.id == intersection_id for a in i.approaches}
        return [c for c in self.crosswalks if c.approach in legs]

    def intersection(self, intersection_id: str) -> Intersection:
        for i in self.intersections:
            if i.id == intersection_id:
                return i
        raise KeyError(intersection_id)


# -- behaviour ------------------------------------------------------------------------------


@dataclass
class Distribution:
    kind: str = "const"  # const | normal | uniform
    value: float = 0.0
    mean: float = 0.0
    sd: float = 0.0
    low: float = -math.inf
    high: float = math.inf

    def sample(self, rng: random.Random) -> float:
        if self.kind == "const":
            return self.value
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high)
        if self.kind == "normal":
            return min(self.high, max(self.low, rng.gauss(self.mean, self.sd)))
        raise ConfigurationError(f"unknown distribution kind {self.kind!r}")

    @property
    def upper(self) -> float:
        if self.kind == "const":
            return self.value
        return self.high


@dataclass
class AgentModel:
    """Class-level (standardized) motion rules plus distributions of personal parameters."""

    length: float = 4.5
    min_gap: float = 2.0
    max_accel: float = 2.5
    comfort_decel: float = 4.0
    emergency_decel: float = 10.0
    desired_speed: Distribution = field(default_factory=lambda: Distribution("normal", mean=12.0, sd=1.5, low=8.0, high=15.0))
    reaction_delay: Distribution = field(default_factory=lambda: Distribution("normal", mean=1.0, sd=0.3, low=0.3, high=2.0))
    compliance: Distribution = field(default_factory=lambda: Distribution("const", value=0.99))


def default_pedestrian_model() -> AgentModel:
    return AgentModel(
        length=0.5,
        min_gap=0.3,
        max_accel=1.5,
        comfort_decel=1.5,
        emergency_decel=3.0,
        desired_speed=Distribution("normal", mean=1.3, sd=0.2, low=0.9, high=1.8),
        reaction_delay=Distribution("const", value=0.5),
        compliance=Distribution("const", value=0.95),
    )


@dataclass
class DemandConfig:
    vehicles: dict[str, float] = field(default_factory=dict)  # approach -> veh/min
    pedestrians: dict[str, float] = field(default_factory=dict)  # crosswalk -> ped/min


# -- geometry ----------------------------------------------------------------------------------


def heading_vector(heading: float) -> tuple[float, float]:
    r = math.radians(heading)
    return math.sin(r), math.cos(r)


def normalize_heading(h: float) -> float:
    h %= 360.0
    return 0.0 if h >= 360.0 else h  # -tiny % 360 rounds to 360.0


def vector_heading(dx: float, dy: float) -> float:
    return normalize_heading(math.degrees(math.atan2(dx, dy)))


class LanePath(NamedTuple):
    intersection: str
    approach: str
    ox: float
    oy: float
    dx: float
    dy: float
    heading: float
    phase: int
    stop_s: float
    entry_s: float
    exit_s: float


class CrossPath(NamedTuple):
    intersection: str
    crosswalk: str
    ox: float
    oy: float
    dx: float
    dy: float
    heading: float
    phase: int
    width: float
    start_u: float
    exit_u: float


class Layout:
    """Precomputed paths and phase membership for a map."""

    def __init__(self, spec: MapSpec, entry_length: float = 150.0, exit_length: float = 60.0,
                 pedestrian_lead: float = 3.0, pedestrian_exit: float = 2.0):
        errors = spec.validate()
        if errors:
            raise ConfigurationError("; ".join(errors))
        self.spec = spec
        self.intersection_ids = [i.id for i in spec.intersections]
        self.lanes: dict[tuple[str, int], LanePath] = {}
        self.crossings: dict[tuple[str, int], CrossPath] = {}
        self.approaches: dict[str, Approach] = {}
        self.approach_intersection: dict[str, str] = {}
        self.crosswalk_intersection: dict[str, str] = {}
        self.phases: dict[str, list] = {}
        for inter in spec.intersections:
            cws = spec.crosswalks_of(inter.id)
            layout = phase_layout(inter, cws)
            self.phases[inter.id] = layout
            phase_of = {m: k for k, (movs, _) in enumerate(layout) for m in movs}
            walk_of = {c: k for k, (_, cs) in enumerate(layout) for c in cs}
            cx, cy = inter.position
            for a in inter.approaches:
                self.approaches[a.id] = a
                self.approach_intersection[a.id] = inter.id
                perp = [b.road_width for b in inter.approaches
                        if abs(((b.heading - a.heading) % 180.0) - 90.0) < 1e-6]
                half_box = (max(perp) if perp else a.road_width) / 2.0
                dx, dy = heading_vector(a.heading)
                rx, ry = dy, -dx  # right-hand side of travel
                lane_w = a.road_width / (2.0 * a.lane_count)
                for lane in range(a.lane_count):
                    off = (lane + 0.5) * lane_w
                    self.lanes[(a.id, lane)] = LanePath(
                        inter.id, a.id, cx + off * rx, cy + off * ry, dx, dy, normalize_heading(a.heading),
                        phase_of[a.id], -(half_box + a.crosswalk_width), -entry_length, exit_length,
                    )
            for cw in cws:
                a = self.approaches[cw.approach]
                perp = [b.road_width for b in inter.approaches
                        if abs(((b.heading - a.heading) % 180.0) - 90.0) < 1e-6]
                half_box = (max(perp) if perp else a.road_width) / 2.0
                dx, dy = heading_vector(a.heading)
                s_cw = -(half_box + a.crosswalk_width / 2.0)
                bx, by = cx + s_cw * dx, cy + s_cw * dy
                rx, ry = dy, -dx
                w = a.road_width
                self.crosswalk_intersection[cw.id] = inter.id
                for side in (1, -1):
                    ux, uy = side * rx, side * ry
                    self.crossings[(cw.id, side)] = CrossPath(
                        inter.id, cw.id, bx - ux * w / 2.0, by - uy * w / 2.0, ux, uy,
                        vector_heading(ux, uy), walk_of[cw.id], w, -pedestrian_lead, w + pedestrian_exit,
                    )

    def crosswalk_center(self, crosswalk_id: str) -> tuple[float, float]:
        p = self.crossings[(crosswalk_id, 1)]
        return p.ox + p.dx * p.width / 2.0, p.oy + p.dy * p.width / 2.0


# -- state ---------------------------------------------------------------------------------


@dataclass(slots=True)
class AgentState:
    id: str
    cls: str
    position: tuple[float, float]
    speed: float
    heading: float
    desired_speed: float
    reaction_delay: float
    route: tuple[str, ...]
    compliance: float
    obeys: bool = True  # outcome of the crossing decision
    path: tuple = ()
    s: float = 0.0
    spawn_time: float = 0.0
    counted: bool = False


@dataclass(frozen=True, slots=True)
class SignalState:
    plan: SignalPlan
    cycle_start: float
    active_phase: int
    green: bool
    walk: bool
    elapsed: float  # since the active phase's green began
    time_remaining: float  # in the current green or all-red interval

    @property
    def label(self) -> str:
        return f"{self.active_phase}{'G' if self.green else 'R'}"


def signal_at(plan: SignalPlan, cycle_start: float, t: float) -> SignalState:
    e = t - cycle_start
    start = 0.0
    for k, p in enumerate(plan.phases):
        if e < start + p.green - 1e-9:
            el = e - start
            return SignalState(plan, cycle_start, k, True, el < p.walk - 1e-9, el, p.green - el)
        if e < start + p.green + p.lost - 1e-9:
            el = e - start
            return SignalState(plan, cycle_start, k, False, False, el, p.green + p.lost - el)
        start += p.green + p.lost
    last = len(plan.phases) - 1
    return SignalState(plan, cycle_start, last, False, False, e, 0.0)


class WorldEvent(NamedTuple):
    time: float
    kind: str  # spawn | cross | depart | violation
    agent: str
    cls: str
    intersection: str


@dataclass(frozen=True)
class WorldState:
    tick: int
    tick_rate: float
    agents: dict[str, AgentState]
    signals: dict[str, SignalState]
    layout: Layout
    models: dict[str, AgentModel]
    backlog: dict[tuple[str, int], tuple] = field(default_factory=dict)
    spawned: int = 0
    departed: int = 0
    next_id: int = 1
    events: tuple[WorldEvent, ...] = ()

    @property
    def time(self) -> float:
        return self.tick / self.tick_rate


def initial_world(layout: Layout, plans: Mapping[str, SignalPlan], tick_rate: float = 30.0,
                  models: Mapping[str, AgentModel] | None = None) -> WorldState:
    missing = [i for i in layout.intersection_ids if i not in plans]
    if missing:
        raise ConfigurationError(f"no signal plan for intersections {missing}")
    if models is None:
        models = {VEHICLE: AgentModel(), PEDESTRIAN: default_pedestrian_model()}
    signals = {i: signal_at(plans[i], 0.0, 0.0) for i in layout.intersection_ids}
    return WorldState(0, tick_rate, {}, signals, layout, dict(models))


# -- dynamics ------------------------------------------------------------------------------


def _advance(v, v_des, a_max, b_comf, b_emg, d_obs, dt):
    """One tick of bounded-acceleration motion toward v_des, stopping within d_obs if given.

    Returns (new speed, distance travelled).  Constant deceleration is integrated exactly,
    so a vehicle braking at v^2/(2d) halts exactly at distance d.
    """
    if v < v_des:
        v_free = min(v_des, v + a_max * dt)
    else:
        v_free = max(v_des, v - b_comf * dt)
    ds_free = 0.5 * (v + v_free) * dt
    if d_obs is None:
        return v_free, ds_free
    rest = d_obs - ds_free
    if rest >= 0.0 and v_free * v_free <= 2.0 * b_comf * rest:
        return v_free, ds_free
    if d_obs <= 0.0 or v <= 0.0:
        return 0.0, 0.0
    b = min(v * v / (2.0 * d_obs), b_emg)
    v_new = v - b * dt
    if v_new <= 0.0:
        return 0.0, v * v / (2.0 * b)
    return v_new, 0.5 * (v + v_new) * dt


def step(world: WorldState, plans: Mapping[str, SignalPlan], dt: float | None = None,
         rng: random.Random | None = None) -> WorldState:
    """Advance the world one tick.  `plans` holds the plan each intersection should run; a
    changed plan takes effect at the next cycle boundary."""
    layout = world.layout
    for iid in layout.intersection_ids:
        if iid not in plans:
            raise ConfigurationError(f"signal plan missing for intersection {iid}")
    expected = 1.0 / world.tick_rate
    if dt is None:
        dt = expected
    elif abs(dt - expected) > 1e-12:
        raise ConfigurationError(f"dt must equal 1/tick_rate ({expected}), got {dt}")
    t1 = (world.tick + 1) / world.tick_rate
    sig = world.signals
    veh = world.models[VEHICLE]
    ped = world.models[PEDESTRIAN]

    by_lane: dict[tuple, list[AgentState]] = {}
    for a in world.agents.values():
        if a.cls == VEHICLE:
            by_lane.setdefault(a.path, []).append(a)

    moved: dict[str, AgentState] = {}
    events: list[WorldEvent] = []

    for key, group in by_lane.items():
        lp = layout.lanes[key]
        st = sig[lp.intersection]
        own_green = st.green and st.active_phase == lp.phase
        opposing_green = st.green and st.active_phase != lp.phase
        group.sort(key=lambda a: -a.s)
        leader = None
        for a in group:
            v, s = a.speed, a.s
            d_obs = None
            held = False
            if not a.counted and a.obeys:
                d_line = lp.stop_s - s
                hold = not own_green or (v < 0.5 and d_line < 2.0 and st.elapsed < a.reaction_delay)
                if hold and d_line >= 0.0 and v * v <= 2.0 * veh.emergency_decel * d_line + 1e-9:
                    d_obs = d_line
                    held = True
            if leader is not None:
                d_lead = leader.s - veh.length - veh.min_gap - s + leader.speed ** 2 / (2.0 * veh.comfort_decel)
                d_obs = d_lead if d_obs is None else min(d_obs, d_lead)
            v_new, ds = _advance(v, a.desired_speed, veh.max_accel, veh.comfort_decel,
                                 veh.emergency_decel, d_obs, dt)
            if leader is not None:
                ds = min(ds, max(0.0, leader.s - veh.length - s))
            s_new = s + ds
            if held:
                s_new = min(s_new, lp.stop_s)  # exact-stop integration can overshoot by round-off
            counted = a.counted
            if not counted and s_new > lp.stop_s:
                counted = True
                events.append(WorldEvent(t1, "cross", a.id, VEHICLE, lp.intersection))
                if a.obeys and opposing_green:
                    events.append(WorldEvent(t1, "violation", a.id, VEHICLE, lp.intersection))
            if s_new >= lp.exit_s:
                events.append(WorldEvent(t1, "depart", a.id, VEHICLE, lp.intersection))
            else:
                moved[a.id] = AgentState(
                    a.id, VEHICLE, (lp.ox + s_new * lp.dx, lp.oy + s_new * lp.dy), v_new, a.heading,
                    a.desired_speed, a.reaction_delay, a.route, a.compliance, a.obeys, key, s_new,
                    a.spawn_time, counted,
                )
            leader = a

    for a in world.agents.values():
        if a.cls != PEDESTRIAN:
            continue
        cp = layout.crossings[a.path]
        st = sig[cp.intersection]
        v, u = a.speed, a.s
        d_obs = None
        if u <= 0.0 and a.obeys:
            may_walk = st.green and st.walk and st.active_phase == cp.phase and st.elapsed >= a.reaction_delay
            if not may_walk and v * v <= 2.0 * ped.emergency_decel * (-u) + 1e-9:
                d_obs = -u
        v_new, du = _advance(v, a.desired_speed, ped.max_accel, ped.comfort_decel, ped.emergency_decel, d_obs, dt)
        u_new = u + du
        if d_obs is not None:
            u_new = min(u_new, 0.0)
        if u <= 0.0 < u_new and a.obeys and st.green and st.active_phase != cp.phase:
            events.append(WorldEvent(t1, "violation", a.id, PEDESTRIAN, cp.intersection))
        counted = a.counted
        if not counted and u_new >= cp.width:
            counted = True
            events.append(WorldEvent(t1, "cross", a.id, PEDESTRIAN, cp.intersection))
        if u_new >= cp.exit_u:
            events.append(WorldEvent(t1, "depart", a.id, PEDESTRIAN, cp.intersection))
        else:
            moved[a.id] = AgentState(
                a.id, PEDESTRIAN, (cp.ox + u_new * cp.dx, cp.oy + u_new * cp.dy), v_new, a.heading,
                a.desired_speed, a.reaction_delay, a.route, a.compliance, a.obeys, a.path, u_new,
                a.spawn_time, counted,
            )

    agents = {k: moved[k] for k in world.agents if k in moved}
    departed = world.departed + sum(1 for e in events if e.kind == "depart")

    signals = {}
    for iid in layout.intersection_ids:
        st = sig[iid]
        plan, start = st.plan, st.cycle_start
        while t1 >= start + plan.cycle - 1e-9:
            start += plan.cycle
            plan = plans[iid]
        signals[iid] = signal_at(plan, start, t1)

    return WorldState(world.tick + 1, world.tick_rate, agents, signals, layout, world.models,
                      world.backlog, world.spawned, departed, world.next_id, tuple(events))


def _poisson(rng: random.Random, lam: float) -> int:
    if lam <= 0.0:
        return 0
    limit = math.exp(-lam)
    k, p = 0, rng.random()
    while p > limit:
        k += 1
        p *= rng.random()
    return k


def spawn_traffic(demand: DemandConfig, world: WorldState, rng: random.Random,
                  dt: float | None = None) -> WorldState:
    """Poisson arrivals over the next tick interval, stamped at the current time.

    Vehicles that find their entry blocked wait in a per-lane backlog and enter later.
    """
    if dt is None:
        dt = 1.0 / world.tick_rate
    layout = world.layout
    t = world.time
    veh = world.models[VEHICLE]
    ped = world.models[PEDESTRIAN]
    backlog = {k: list(v) for k, v in world.backlog.items()}
    agents = dict(world.agents)
    events: list[WorldEvent] = []
    next_id = world.next_id
    spawned = world.spawned

    for aid, a in layout.approaches.items():
        rate = demand.vehicles.get(aid, 0.0)
        if rate < 0:
            raise ConfigurationError(f"negative vehicle rate for {aid}")
        for _ in range(_poisson(rng, rate / 60.0 * dt)):
            lane = rng.randrange(a.lane_count)
            compliance = min(1.0, max(0.0, veh.compliance.sample(rng)))
            backlog.setdefault((aid, lane), []).append((
                veh.desired_speed.sample(rng), veh.reaction_delay.sample(rng), compliance,
                rng.random() < compliance,
            ))

    tails: dict[tuple, AgentState] = {}
    for a in agents.values():
        if a.cls == VEHICLE and (a.path not in tails or a.s < tails[a.path].s):
            tails[a.path] = a
    for key in sorted(backlog):
        queue = backlog[key]
        if not queue:
            continue
        lp = layout.lanes[key]
        tail = tails.get(key)
        desired, reaction, compliance, obeys = queue[0]
        speed = desired
        if tail is not None:
            gap = tail.s - veh.length - veh.min_gap - lp.entry_s
            if gap < 0:
                continue
            speed = min(desired, math.sqrt(tail.speed ** 2 + 2.0 * veh.comfort_decel * gap))
        queue.pop(0)
        aid_ = f"v{next_id}"
        next_id += 1
        s = lp.entry_s
        agents[aid_] = AgentState(aid_, VEHICLE, (lp.ox + s * lp.dx, lp.oy + s * lp.dy), speed, lp.heading,
                                  desired, reaction, (key[0],), compliance, obeys, key, s, t)
        spawned += 1
        events.append(WorldEvent(t, "spawn", aid_, VEHICLE, lp.intersection))

    for cw in layout.spec.crosswalks:
        rate = demand.pedestrians.get(cw.id, 0.0)
        if rate < 0:
            raise ConfigurationError(f"negative pedestrian rate for {cw.id}")
        for _ in range(_poisson(rng, rate / 60.0 * dt)):
            side = 1 if rng.random() < 0.5 else -1
            cp = layout.crossings[(cw.id, side)]
            compliance = min(1.0, max(0.0, ped.compliance.sample(rng)))
            desired = ped.desired_speed.sample(rng)
            reaction = ped.reaction_delay.sample(rng)
            obeys = rng.random() < compliance
            pid = f"p{next_id}"
            next_id += 1
            u = cp.start_u
            agents[pid] = AgentState(pid, PEDESTRIAN, (cp.ox + u * cp.dx, cp.oy + u * cp.dy), desired, cp.heading,
                                     desired, reaction, (cw.id,), compliance, obeys, (cw.id, side), u, t)
            spawned += 1
            events.append(WorldEvent(t, "spawn", pid, PEDESTRIAN, cp.intersection))

    return WorldState(world.tick, world.tick_rate, agents, world.signals, layout, world.models,
                      {k: tuple(v) for k, v in backlog.items() if v}, spawned, world.departed, next_id,
                      world.events + tuple(events))


# -- flow accounting ------------------------------------------------------------------------


class FlowLog:
    """Append-only record of stop-line / crosswalk crossings with running per-intersection totals."""

    def __init__(self, intersections: Iterable[str]):
        self.intersections = list(intersections)
        self.crossings: list[WorldEvent] = []
        self.totals = {i: {VEHICLE: 0, PEDESTRIAN: 0} for i in self.intersections}

    def record(self, events: Iterable[WorldEvent]) -> None:
        for e in events:
            if e.kind == "cross":
                self.crossings.append(e)
                self.totals[e.intersection][e.cls] += 1


def flow_counts(log: FlowLog, intersection: str, window: float, end: float | None = None) -> tuple[float, float]:
    """(vehicles/min, pedestrians/min) crossing `intersection` during (end - window, end]."""
    if window <= 0:
        raise ValueError("window must be positive")
    if intersection not in log.totals:
        raise KeyError(f"unknown intersection {intersection!r}")
    if end is None:
        end = log.crossings[-1].time if log.crossings else 0.0
    v = p = 0
    for e in log.crossings:
        if e.intersection == intersection and end - window < e.time <= end:
            if e.cls == VEHICLE:
                v += 1
            else:
                p += 1
    return v * 60.0 / window, p * 60.0 / window
