"""Signal timing: pedestrian clearance, demand-proportional splits, fixed baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

if TYPE_CHECKING:
    from .world import Crosswalk, Intersection

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Phase:
    movements: tuple[str, ...]
    green: float
    walk: float = 0.0
    clearance: float = 0.0
    crosswalks: tuple[str, ...] = ()
    lost: float = 0.0  # all-red following the green

    @property
    def duration(self) -> float:
        return self.green + self.lost


@dataclass(frozen=True)
class SignalPlan:
    intersection: str
    phases: tuple[Phase, ...]
    infeasible: bool = False

    @property
    def cycle(self) -> float:
        return sum(p.green for p in self.phases) + self.lost_time

    @property
    def lost_time(self) -> float:
        return sum(p.lost for p in self.phases)

    def to_dict(self) -> dict:
        return {
            "intersection": self.intersection,
            "cycle": round(self.cycle, 6),
            "infeasible": self.infeasible,
            "phases": [
                {
                    "movements": list(p.movements),
                    "green": p.green,
                    "walk": p.walk,
                    "clearance": p.clearance,
                    "crosswalks": list(p.crosswalks),
                    "lost": p.lost,
                }
                for p in self.phases
            ],
        }


@dataclass(frozen=True)
class Constraints:
    min_green: float = 10.0
    max_cycle: float = 120.0
    cycle: float = 60.0  # adaptive cycle when cycle_mode is "fixed"
    cycle_mode: str = "demand"  # "demand": shortest cycle serving demand; "fixed": use `cycle`
    saturation_flow: float = 55.0  # veh/min per lane (queue discharge rate of the car-following model)
    target_saturation: float = 0.9  # degree of saturation each phase's green is sized for
    demand_smoothing: float = 0.5  # weight of the newest window in the smoothed demand (1 = no memory)
    startup: float = 3.0
    lost_per_phase: float = 3.0
    reference_walking_speed: float = 1.2
    fixed_cycle: float = 60.0
    min_design_speed: float = 0.5


@dataclass
class DemandEstimate:
    intersection: str
    vehicle_flow: dict[str, float] = field(default_factory=dict)  # approach -> veh/min
    pedestrian_flow: dict[str, float] = field(default_factory=dict)  # crosswalk -> ped/min
    walking_speed: float = 1.2
    window: float = 60.0


class PlanError(ValueError):
    pass


def _ceil_tenth(x: float) -> float:
    # values within 1e-7 s above a tenth count as that tenth (float slack, and the width -> 0 limit)
    return math.ceil(x * 10.0 - 1e-6) / 10.0


def pedestrian_clearance(road_width: float, walking_speed: float, startup: float) -> float:
    """Minimum walk + clearance time for one crossing, rounded up to 0.1 s."""
    if road_width <= 0 or walking_speed <= 0:
        raise PlanError(f"road_width and walking_speed must be positive, got {road_width}, {walking_speed}")
    if startup < 0:
        raise PlanError(f"startup must be non-negative, got {startup}")
    return _ceil_tenth(startup + road_width / walking_speed)


def design_walking_speed(params: Mapping[str, float], constraints: Constraints) -> float:
    """15th-percentile walking speed: mean - 1 sd when the second moment is known, else 0.85 * mean."""
    mean = params.get("walking_speed")
    if mean is None or not mean > 0:
        mean = constraints.reference_walking_speed
        second = None
    else:
        second = params.get("walking_speed_sq")
    if second is not None and second >= mean * mean:
        speed = mean - math.sqrt(second - mean * mean)
    else:
        speed = 0.85 * mean
    return max(speed, constraints.min_design_speed)


def phase_layout(intersection: "Intersection", crosswalks: Sequence["Crosswalk"]):
    """Group approaches into phases by travel axis; crosswalks walk with the phase that does
    not serve the leg they cross.  Returns a list of (movements, crosswalk ids)."""
    axes: dict[float, list[str]] = {}
    for a in intersection.approaches:
        axes.setdefault(round(a.heading % 180.0, 6), []).append(a.id)
    groups = [tuple(axes[k]) for k in sorted(axes)]
    walks: list[list[str]] = [[] for _ in groups]
    for cw in crosswalks:
        for i, movements in enumerate(groups):
            if cw.approach not in movements:
                walks[i].append(cw.id)
                break
    return [(g, tuple(w)) for g, w in zip(groups, walks)]


def _widths(intersection, crosswalks) -> dict[str, float]:
    by_id = {a.id: a for a in intersection.approaches}
    return {cw.id: by_id[cw.approach].road_width for cw in crosswalks}


def _build_phase(movements, cws, green, widths, speed, constraints) -> Phase:
    if cws:
        clearance = _ceil_tenth(max(widths[c] for c in cws) / speed)
        walk = round(green - clearance, 1)
    else:
        clearance = walk = 0.0
    return Phase(tuple(movements), round(green, 1), walk, clearance, tuple(cws), constraints.lost_per_phase)


def _floors(layout, widths, speed, constraints) -> list[float]:
    floors = []
    for _, cws in layout:
        f = constraints.min_green
        for c in cws:
            f = max(f, pedestrian_clearance(widths[c], speed, constraints.startup))
        floors.append(_ceil_tenth(f))
    return floors


def _split(budget: float, demand: list[float], floors: list[float]) -> list[float]:
    """Proportional split of `budget` with per-phase floors (water filling)."""
    n = len(demand)
    fixed: dict[int, float] = {}
    while True:
        free = [i for i in range(n) if i not in fixed]
        remaining = budget - sum(fixed.values())
        total = sum(demand[i] for i in free)
        if total > 0:
            share = {i: remaining * demand[i] / total for i in free}
        else:
            share = {i: remaining / len(free) for i in free}
        low = [i for i in free if share[i] < floors[i]]
        if not low:
            greens = [0.0] * n
            for i, g in fixed.items():
                greens[i] = g
            for i in free:
                greens[i] = share[i]
            return greens
        for i in low:
            fixed[i] = floors[i]
        if len(fixed) == n:
            return [fixed[i] for i in range(n)]


def practical_cycle(phase_flows: Sequence[float], floors: Sequence[float], lost: float,
                    constraints: Constraints) -> float:
    """Shortest cycle in which every phase gets both its floor and the green that keeps it at
    the target degree of saturation; max_cycle when the demand cannot be served at that level.

    Without floors this is the classic L x / (x - Y).  Short cycles keep pedestrian and vehicle
    waits short, so the cycle only grows as far as demand requires.
    """
    x = constraints.target_saturation
    ratios = [max(0.0, q) / constraints.saturation_flow for q in phase_flows]
    if sum(ratios) >= x:
        return constraints.max_cycle
    # smallest C with lost + sum(max(floor, ratio * C / x)) <= C; the map is a contraction
    cycle = lost + sum(floors)
    for _ in range(500):
        need = lost + sum(max(f, r * cycle / x) for f, r in zip(floors, ratios))
        if need <= cycle + 1e-9:
            break
        cycle = need
    return min(constraints.max_cycle, _ceil_tenth(cycle))


def smooth_demand(previous: DemandEstimate | None, latest: DemandEstimate, alpha: float) -> DemandEstimate:
    """Exponentially smoothed flows: alpha * latest + (1 - alpha) * previous, per approach/crosswalk."""
    if previous is None or alpha >= 1.0:
        return latest

    def mix(new: Mapping[str, float], old: Mapping[str, float]) -> dict[str, float]:
        keys = sorted(set(new) | set(old))
        return {k: alpha * new.get(k, 0.0) + (1.0 - alpha) * old.get(k, 0.0) for k in keys}

    return DemandEstimate(latest.intersection, mix(latest.vehicle_flow, previous.vehicle_flow),
                          mix(latest.pedestrian_flow, previous.pedestrian_flow), latest.walking_speed, latest.window)


def optimize_plan(
    demand: DemandEstimate,
    intersection: "Intersection",
    crosswalks: Sequence["Crosswalk"],
    constraints: Constraints = Constraints(),
    design_speed: float | None = None,
) -> SignalPlan:
    """Split the green budget in proportion to each phase's critical lane flow,
    then raise phases to their pedestrian floors and keep the cycle within max_cycle."""
    speed = design_speed if design_speed is not None else 0.85 * demand.walking_speed
    layout = phase_layout(intersection, crosswalks)
    widths = _widths(intersection, crosswalks)
    lanes = {a.id: a.lane_count for a in intersection.approaches}
    floors = _floors(layout, widths, speed, constraints)
    lost = constraints.lost_per_phase * len(layout)

    phase_demand = []
    for movements, _ in layout:
        per_lane = [max(0.0, demand.vehicle_flow.get(m, 0.0)) / lanes[m] for m in movements]
        phase_demand.append(max(per_lane) if per_lane else 0.0)

    if constraints.cycle_mode == "demand":
        cycle = practical_cycle(phase_demand, floors, lost, constraints)
    else:
        cycle = constraints.cycle
    budget = min(cycle, constraints.max_cycle) - lost
    if sum(floors) + lost > constraints.max_cycle + 1e-9:
        log.warning("infeasible plan for %s: floors %.1f s exceed max cycle", demand.intersection, sum(floors))
        greens = floors
        infeasible = True
    elif sum(floors) >= budget:
        greens = floors
        infeasible = False
    else:
        greens = _split(budget, phase_demand, floors)
        greens = [max(f, round(g, 1)) for g, f in zip(greens, floors)]
        infeasible = False
    phases = tuple(
        _build_phase(m, cws, g, widths, speed, constraints) for (m, cws), g in zip(layout, greens)
    )
    return SignalPlan(intersection.id, phases, infeasible)


def fixed_plan(
    intersection: "Intersection", crosswalks: Sequence["Crosswalk"], constraints: Constraints = Constraints()
) -> SignalPlan:
    """Demand-independent baseline: equal phase slots of the fixed cycle."""
    layout = phase_layout(intersection, crosswalks)
    widths = _widths(intersection, crosswalks)
    speed = constraints.reference_walking_speed
    floors = _floors(layout, widths, speed, constraints)
    slot = constraints.fixed_cycle / len(layout)
    greens = [max(f, slot - constraints.lost_per_phase) for f in floors]
    phases = tuple(_build_phase(m, cws, g, widths, speed, constraints) for (m, cws), g in zip(layout, greens))
    return SignalPlan(intersection.id, phases)


def check_plan(
    plan: SignalPlan,
    intersection: "Intersection",
    crosswalks: Sequence["Crosswalk"],
    constraints: Constraints,
    design_speed: float,
) -> list[str]:
    """Constraint checker: returns human-readable violations (empty when the plan is valid)."""
    problems = []
    widths = _widths(intersection, crosswalks)
    served: dict[str, Phase] = {}
    for i, p in enumerate(plan.phases):
        if p.green < constraints.min_green - 1e-9:
            problems.append(f"phase {i}: green {p.green} < min_green {constraints.min_green}")
        if p.walk < -1e-9 or p.clearance < -1e-9:
            problems.append(f"phase {i}: negative pedestrian interval")
        if p.walk + p.clearance > p.green + 1e-9:
            problems.append(f"phase {i}: pedestrian interval exceeds green")
        for c in p.crosswalks:
            served[c] = p
    if plan.cycle > constraints.max_cycle + 1e-9 and not plan.infeasible:
        problems.append(f"cycle {plan.cycle} > max_cycle {constraints.max_cycle}")
    for cw in crosswalks:
        p = served.get(cw.id)
        if p is None:
            problems.append(f"crosswalk {cw.id} is never served")
            continue
        need = pedestrian_clearance(widths[cw.id], design_speed, constraints.startup)
        if p.walk + p.clearance < need - 1e-9:
            problems.append(f"crosswalk {cw.id}: walk+clearance {p.walk + p.clearance:.1f} < {need:.1f}")
    return problems
