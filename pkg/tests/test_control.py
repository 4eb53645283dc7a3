import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cross_map
from fedtwin.control import (
    Constraints,
    DemandEstimate,
    PlanError,
    check_plan,
    design_walking_speed,
    fixed_plan,
    optimize_plan,
    pedestrian_clearance,
    phase_layout,
    practical_cycle,
    smooth_demand,
)
from fedtwin.scenario import canonical_scenario


def test_clearance_hand_value():
    # 3 + 14 / 1.2 = 14.666..., rounded up to the next 0.1 s
    assert pedestrian_clearance(14.0, 1.2, 3.0) == pytest.approx(14.7)


def test_clearance_narrow_road_tends_to_startup():
    assert pedestrian_clearance(1e-9, 1.2, 3.0) == pytest.approx(3.0)
    assert pedestrian_clearance(0.05, 1.0, 3.0) == pytest.approx(3.1)


@given(st.floats(0.5, 40.0), st.floats(0.3, 3.0))
def test_doubling_speed_halves_crossing_term(width, speed):
    # compare the unrounded crossing terms; the rounded results differ by at most one step
    assert (width / (2 * speed)) * 2 == pytest.approx(width / speed)
    a = pedestrian_clearance(width, speed, 0.0)
    b = pedestrian_clearance(width, 2 * speed, 0.0)
    assert abs(b - a / 2) <= 0.1 + 1e-9


@pytest.mark.parametrize("args", [(0.0, 1.2, 3.0), (14.0, 0.0, 3.0), (-1.0, 1.2, 3.0), (14.0, 1.2, -1.0)])
def test_clearance_rejects_bad_inputs(args):
    with pytest.raises(PlanError):
        pedestrian_clearance(*args)


def test_phase_layout_groups_axes_and_crosswalks():
    spec = cross_map()
    layout = phase_layout(spec.intersections[0], spec.crosswalks)
    assert layout == [(("N", "S"), ("CW",)), (("E", "W"), ("CN",))]


def test_proportional_split_hand_value():
    spec = cross_map(with_crosswalks=False)
    x = spec.intersections[0]
    c = Constraints(min_green=10.0, cycle=46.0, cycle_mode="fixed")  # 46 s cycle minus 2 x 3 s lost = 40 s budget
    plan = optimize_plan(DemandEstimate("X", {"N": 30.0, "E": 20.0}), x, [], c)  # E has 2 lanes: 10 per lane
    assert [p.green for p in plan.phases] == [30.0, 10.0]
    assert plan.cycle == pytest.approx(46.0)
    assert check_plan(plan, x, [], c, 1.0) == []


def test_symmetric_demand_gives_equal_greens():
    spec = cross_map(with_crosswalks=False)
    plan = optimize_plan(DemandEstimate("X", {"N": 12.0, "S": 5.0, "E": 24.0}), spec.intersections[0], [],
                         Constraints(cycle_mode="fixed"))
    assert plan.phases[0].green == plan.phases[1].green == 27.0
    plan = optimize_plan(DemandEstimate("X", {"N": 12.0, "S": 5.0, "E": 24.0}), spec.intersections[0], [])
    assert plan.phases[0].green == plan.phases[1].green


def test_pedestrian_floor_raises_short_phase():
    spec = cross_map()
    x = spec.intersections[0]
    # all demand on N/S; the E/W phase still carries crosswalk CN (10 m) whose floor is 3 + 10/1.02
    plan = optimize_plan(DemandEstimate("X", {"N": 40.0}), x, spec.crosswalks, Constraints(cycle_mode="fixed"),
                         design_speed=1.02)
    floor = pedestrian_clearance(10.0, 1.02, 3.0)
    assert plan.phases[1].green == pytest.approx(floor)
    assert plan.phases[0].green == pytest.approx(54.0 - floor)
    assert plan.phases[1].walk + plan.phases[1].clearance >= floor - 1e-9
    assert check_plan(plan, x, spec.crosswalks, Constraints(), 1.02) == []


def test_infeasible_floors_flagged():
    spec = cross_map()
    x = spec.intersections[0]
    plan = optimize_plan(DemandEstimate("X", {"N": 1.0}), x, spec.crosswalks, Constraints(max_cycle=40.0),
                         design_speed=0.5)
    assert plan.infeasible
    assert [p.green for p in plan.phases] == [pedestrian_clearance(14.0, 0.5, 3.0), pedestrian_clearance(10.0, 0.5, 3.0)]


def test_practical_cycle_hand_values():
    c = Constraints(saturation_flow=50.0)
    # ratios 0.4 and 0.2, L = 6 s, x = 0.9; without floors C = L x / (x - Y) = 5.4 / 0.3 = 18 s
    assert practical_cycle([20.0, 10.0], [0.0, 0.0], 6.0, c) == pytest.approx(18.0)
    # 10 s floors bind the light phase only: C = 6 + 10 + (0.4 / 0.9) C  ->  C = 28.8 s
    assert practical_cycle([20.0, 10.0], [10.0, 10.0], 6.0, c) == pytest.approx(28.8)
    # a 30 s floor on the light phase: C = 6 + 30 + (0.4 / 0.9) C  ->  C = 64.8 s
    assert practical_cycle([20.0, 10.0], [10.0, 30.0], 6.0, c) == pytest.approx(64.8)
    assert practical_cycle([30.0, 20.0], [10.0, 10.0], 6.0, c) == c.max_cycle  # Y >= target saturation
    assert practical_cycle([0.0, 0.0], [10.0, 12.0], 6.0, c) == pytest.approx(28.0)


def test_smooth_demand_mixes_flows():
    old = DemandEstimate("I1", {"a": 10.0, "b": 4.0}, {"w": 2.0})
    new = DemandEstimate("I1", {"a": 20.0}, {"w": 4.0, "v": 1.0}, walking_speed=1.3)
    got = smooth_demand(old, new, 0.5)
    assert got.vehicle_flow == {"a": 15.0, "b": 2.0}
    assert got.pedestrian_flow == {"v": 0.5, "w": 3.0}
    assert got.walking_speed == 1.3
    assert smooth_demand(None, new, 0.5) is new
    assert smooth_demand(old, new, 1.0) is new


@given(st.lists(st.floats(0.0, 30.0), min_size=2, max_size=4), st.floats(5.0, 25.0))
def test_practical_cycle_keeps_phases_below_target_saturation(flows, floor):
    c = Constraints(saturation_flow=55.0)
    floors = [floor] * len(flows)
    lost = c.lost_per_phase * len(flows)
    cycle = practical_cycle(flows, floors, lost, c)
    assert lost + sum(floors) - 1e-9 <= cycle <= c.max_cycle
    if cycle < c.max_cycle:
        for q, f in zip(flows, floors):
            assert lost + sum(max(ff, qq / c.saturation_flow * cycle / c.target_saturation)
                              for ff, qq in zip(floors, flows)) <= cycle + 1e-6


def test_fixed_plan_canonical_cycle_and_split():
    sc = canonical_scenario()
    for i in sc.map.intersections:
        cws = sc.map.crosswalks_of(i.id)
        plan = fixed_plan(i, cws, sc.constraints)
        assert plan.cycle == pytest.approx(60.0)
        assert [p.duration for p in plan.phases] == [30.0, 30.0]
        assert plan == fixed_plan(i, cws, sc.constraints)
        assert check_plan(plan, i, cws, sc.constraints, sc.constraints.reference_walking_speed) == []


def test_design_walking_speed():
    c = Constraints()
    assert design_walking_speed({}, c) == pytest.approx(0.85 * 1.2)
    assert design_walking_speed({"walking_speed": 1.3}, c) == pytest.approx(0.85 * 1.3)
    assert design_walking_speed({"walking_speed": 1.3, "walking_speed_sq": 1.3 ** 2 + 0.04}, c) == pytest.approx(1.1)
    assert design_walking_speed({"walking_speed": 0.4}, c) == c.min_design_speed


flows = st.floats(0.0, 80.0)
demands = st.fixed_dictionaries({"N": flows, "S": flows, "E": flows, "W": flows})


@given(demands, st.floats(0.5, 1.6), st.floats(40.0, 120.0))
def test_every_adaptive_plan_passes_the_checker(vf, speed, cycle):
    spec = cross_map()
    x = spec.intersections[0]
    c = Constraints(cycle=cycle)
    plan = optimize_plan(DemandEstimate("X", vf), x, spec.crosswalks, c, design_speed=speed)
    assert check_plan(plan, x, spec.crosswalks, c, speed) == []
    assert plan == optimize_plan(DemandEstimate("X", dict(vf)), x, spec.crosswalks, c, design_speed=speed)


@given(demands, st.sampled_from(["N", "S", "E", "W"]), st.floats(0.0, 40.0))
def test_more_demand_never_shrinks_the_share(vf, leg, extra):
    spec = cross_map()
    x = spec.intersections[0]
    idx = 0 if leg in ("N", "S") else 1
    more = {**vf, leg: vf[leg] + extra}
    # constant cycle: the split itself is monotone
    c = Constraints(cycle_mode="fixed")
    before = optimize_plan(DemandEstimate("X", vf), x, spec.crosswalks, c, design_speed=1.0)
    after = optimize_plan(DemandEstimate("X", more), x, spec.crosswalks, c, design_speed=1.0)
    share = lambda p: p.phases[idx].green / sum(ph.green for ph in p.phases)
    assert share(after) >= share(before) - 0.1 / 54.0 - 1e-9  # one rounding step
    # demand-sized cycle: the cycle may grow and feed other phases, but this phase never loses green
    before = optimize_plan(DemandEstimate("X", vf), x, spec.crosswalks, design_speed=1.0)
    after = optimize_plan(DemandEstimate("X", more), x, spec.crosswalks, design_speed=1.0)
    assert after.phases[idx].green >= before.phases[idx].green - 0.1 - 1e-9
    assert after.cycle >= before.cycle - 0.2 - 1e-9


def test_checker_reports_violations():
    spec = cross_map()
    x = spec.intersections[0]
    plan = fixed_plan(x, spec.crosswalks)
    assert check_plan(plan, x, spec.crosswalks, Constraints(), 0.5) != []  # too slow for the 14 m leg
    assert any("never served" in p for p in check_plan(plan, x, spec.crosswalks[:1] + [type(spec.crosswalks[0])("CZ", "S")],
                                                        Constraints(), 1.2))
    assert math.isclose(plan.lost_time, 6.0)
