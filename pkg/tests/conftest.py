import dataclasses
import os

from hypothesis import HealthCheck, settings

from fedtwin.control import fixed_plan
from fedtwin.world import AgentState, Approach, Crosswalk, Intersection, Layout, MapSpec, initial_world

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def cross_map(with_crosswalks: bool = True) -> MapSpec:
    """One four-leg intersection at the origin: N/S legs 10 m wide, E/W legs 14 m wide."""
    legs = [Approach("N", 180.0, 1, 10.0), Approach("S", 0.0, 1, 10.0),
            Approach("E", 270.0, 2, 14.0), Approach("W", 90.0, 2, 14.0)]
    cws = [Crosswalk("CW", "W"), Crosswalk("CN", "N")] if with_crosswalks else []
    return MapSpec([Intersection("X", (0.0, 0.0), legs)], cws)


def world_with(spec: MapSpec, agents=(), tick_rate: float = 30.0, plans=None):
    layout = Layout(spec)
    if plans is None:
        plans = {i.id: fixed_plan(i, spec.crosswalks_of(i.id)) for i in spec.intersections}
    w = initial_world(layout, plans, tick_rate)
    if agents:
        w = dataclasses.replace(w, agents={a.id: a for a in agents}, spawned=len(agents), next_id=len(agents) + 1)
    return w, plans


def vehicle_on(layout: Layout, approach: str, s: float, speed: float, desired: float | None = None,
               lane: int = 0, aid: str = "v1") -> AgentState:
    lp = layout.lanes[(approach, lane)]
    return AgentState(aid, "vehicle", (lp.ox + s * lp.dx, lp.oy + s * lp.dy), speed, lp.heading,
                      desired if desired is not None else max(speed, 1.0), 1.0, (approach,), 1.0, True,
                      (approach, lane), s, 0.0)


def pedestrian_on(layout: Layout, crosswalk: str, u: float, speed: float = 0.0, side: int = 1,
                  aid: str = "p1") -> AgentState:
    cp = layout.crossings[(crosswalk, side)]
    return AgentState(aid, "pedestrian", (cp.ox + u * cp.dx, cp.oy + u * cp.dy), speed, cp.heading,
                      1.3, 0.5, (crosswalk,), 1.0, True, (crosswalk, side), u, 0.0)


# -- acceptance summary ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
