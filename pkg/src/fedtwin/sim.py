"""One seeded run: world ticks, sensors, region processors, cloud, signal controllers.

Per world tick k (time t_k = k / tick_rate) the handler
  1. advances the world from k-1 to k,
  2. captures every due sensor frame of the state at k,
  3. draws arrivals, stamped t_k; they are first visible to the frame of tick k+1.
Everything else happens on network deliveries and timers of the shared event loop.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .cloud import CloudNode, broadcast_params
from .control import SignalPlan, check_plan, design_walking_speed, fixed_plan, optimize_plan, smooth_demand
from .edge import EdgeNode, LocalParamEstimate, dead_reckoning_bound
from .metrics import MetricsReport, summarize
from .netsim import (
    AGENT_PARAMS,
    DETECTIONS,
    GLOBAL_PARAMS,
    HEADER_BYTES,
    RAW_FRAME,
    SIGNAL_PLAN,
    SVFDT,
    TRAFFIC_PROGRAM,
    EventLoop,
    LinkSpec,
    Message,
    Network,
    PolicyViolation,
    Topology,
    TraceRow,
    audit_privacy,
)
from .scenario import Scenario, ScenarioError
from .semantics import program_size
from .sensing import CAMERA, frame_size, observe, sensor_rng
from .world import (
    PEDESTRIAN,
    VEHICLE,
    FlowLog,
    Layout,
    flow_counts,
    heading_vector,
    initial_world,
    spawn_traffic,
    step,
)

ITEM_BYTES = 24
ROUNDING_SLACK = 0.01  # m; cm position rounding in the semantic schema


class InvariantViolation(RuntimeError):
    pass


def _allowed(*kinds: str) -> frozenset:
    return frozenset(kinds)


def sensor_node(spec) -> str:
    return f"{'cam' if spec.kind == CAMERA else 'radar'}:{spec.id}"


def build_topology(sc: Scenario) -> Topology:
    """Nodes, links and per-link message policy for the scenario's framework."""
    net = sc.network
    sensors = {s.id: s for s in sc.sensors}
    links: list[LinkSpec] = []
    nodes = ["cloud"]

    def link(src, dst, tpl, allowed):
        links.append(LinkSpec(src, dst, tpl.bandwidth, tpl.latency, tpl.jitter, tpl.loss_prob, allowed))

    for e in sc.edges:
        hub = f"edge:{e.id}" if sc.topology == SVFDT else f"gw:{e.id}"
        nodes.append(hub)
        for sid in e.sensors:
            node = sensor_node(sensors[sid])
            nodes.append(node)
            link(node, hub, net.end_edge, _allowed(RAW_FRAME, DETECTIONS))
        if sc.topology == SVFDT:
            link(hub, "cloud", net.edge_cloud, _allowed(TRAFFIC_PROGRAM, AGENT_PARAMS))
            link("cloud", hub, net.cloud_edge, _allowed(GLOBAL_PARAMS))
        else:
            link(hub, "cloud", net.edge_cloud, _allowed(RAW_FRAME, DETECTIONS))
            link("cloud", hub, net.cloud_edge, _allowed(SIGNAL_PLAN))
        for iid in e.intersections:
            nodes.append(f"sig:{iid}")
            link(hub, f"sig:{iid}", net.edge_signal, _allowed(SIGNAL_PLAN))
    return Topology(sc.topology, nodes, links)


@dataclass
class FrameRef:
    sensor: str
    tick: int
    world: object


class RegionProcessor:
    """Builds one region's twin from its sensors' frames.  Lives on the edge node in svfdt
    and on the cloud in terminal-server, where it has no on-site learning."""

    def __init__(self, sim: "Simulation", cfg, host: str, learning: bool):
        self.sim = sim
        self.cfg = cfg
        self.host = host
        self.learning = learning
        sc = sim.sc
        self.node = EdgeNode(cfg.id, cfg.intersections, sim.layout, sc.tolerances, sc.stale_timeout)
        self.sensors = [sim.sensors[s] for s in sorted(cfg.sensors)]
        self.stride = {s.id: max(1, round(sc.tick_rate / s.frame_rate)) for s in self.sensors}
        self.frames_processed = {s.id: 0 for s in self.sensors if s.kind == CAMERA}
        self.pending: dict[int, dict[str, object]] = {}
        self.busy_until = 0.0
        self.reflected: set[str] = set()
        self.smoothed: dict = {}  # intersection -> smoothed DemandEstimate fed to the optimizer

    def expected(self, k: int) -> set[str]:
        return {s.id for s in self.sensors if k % self.stride[s.id] == 0}

    def receive(self, sensor_id: str, k: int, payload, now: float) -> None:
        got = self.pending.setdefault(k, {})
        got[sensor_id] = payload
        if len(got) == len(self.expected(k)):
            for older in sorted(x for x in self.pending if x < k):  # frames missing a lost message
                self._admit(older, now)
            self._admit(k, now)

    def _admit(self, k: int, now: float) -> None:
        got = self.pending.pop(k)
        start = max(now, self.busy_until)
        end = start + self.cfg.compute_delay
        self.busy_until = end
        self.sim.loop.schedule(end, self._process, k, got, start)

    def _process(self, k: int, got: dict, start: float) -> None:
        sim = self.sim
        now = sim.loop.now
        t_k = k / sim.sc.tick_rate
        dets = []
        world = None
        for sid in sorted(got):
            spec = sim.sensors[sid]
            payload = got[sid]
            if spec.kind == CAMERA:
                world = payload
                seen = self.frames_processed[sid] if self.learning else 0
                obs = observe(spec, payload, seen, max(0.0, start - t_k), sim.sensor_rng[sid])
                self.frames_processed[sid] += 1
                sim.record_accuracy(sid, t_k, obs)
                dets.extend(obs)
            else:
                dets.extend(payload)
        signals = None
        if world is not None:
            signals = {iid: world.signals[iid].label for iid in self.cfg.intersections}
        program = self.node.tick(dets, t_k, signals, sim.sc.weather)
        twin = self.node.twin.entities
        for c in program.commands:
            if c.method in ("spawn", "setID"):
                eid = c.args[0]
                if eid not in self.reflected and eid in twin and eid in sim.spawn_time:
                    self.reflected.add(eid)
                    sim.reflect_local(eid, now, self.cfg.id)
        if sim.sc.topology == SVFDT:
            sim.send(TRAFFIC_PROGRAM, HEADER_BYTES + program_size(program), self.host, "cloud", program)
        else:
            sim.cloud.receive_program(program)

    def close_window(self, start: float, end: float) -> list[LocalParamEstimate]:
        sim = self.sim
        if sim.sc.control == "adaptive":
            demand = self.node.demand(start, end)
            speed = design_walking_speed(self.node.global_params, sim.sc.constraints)
            for iid in self.cfg.intersections:
                inter = sim.sc.map.intersection(iid)
                cws = sim.sc.map.crosswalks_of(iid)
                est = self.smoothed[iid] = smooth_demand(self.smoothed.get(iid), demand[iid],
                                                         sim.sc.constraints.demand_smoothing)
                plan = optimize_plan(est, inter, cws, sim.sc.constraints, speed)
                sim.plan_emitted(plan, check_plan(plan, inter, cws, sim.sc.constraints, speed))
                sim.send(SIGNAL_PLAN, HEADER_BYTES + ITEM_BYTES * len(plan.phases), self.host, f"sig:{iid}", plan)
        return self.node.window_params(start, end)


class Simulation:
    def __init__(self, scenario: Scenario, record_trace: bool = False, check_dead_reckoning: bool = False,
                 check_invariants: bool = True):
        errors = scenario.validate()
        if errors:
            raise ScenarioError(errors)
        sc = self.sc = scenario
        seed = sc.seed
        self.record_trace = record_trace
        self.check_dr = check_dead_reckoning
        self.check_invariants = check_invariants
        self.layout = Layout(sc.map)
        self.loop = EventLoop()
        self.topology = build_topology(sc)
        self.net = Network(self.loop, self.topology, rng_for=lambda n: random.Random(f"{seed}/link/{n}"),
                           record_trace=record_trace)
        self.trace = self.net.trace
        self.sensors = {s.id: s for s in sc.sensors}
        self.sensor_rng = {s.id: sensor_rng(seed, s.id) for s in sc.sensors}
        self.world_rng = random.Random(f"{seed}/world")
        self.plans: dict[str, SignalPlan] = {
            i.id: fixed_plan(i, sc.map.crosswalks_of(i.id), sc.constraints) for i in sc.map.intersections
        }
        models = {VEHICLE: sc.vehicle_model, PEDESTRIAN: sc.pedestrian_model}
        self.world = initial_world(self.layout, self.plans, sc.tick_rate, models)
        self.flowlog = FlowLog(self.layout.intersection_ids)
        self.n_ticks = int(round(sc.duration * sc.tick_rate))

        self.spawn_time: dict[str, float] = {}
        self.spawn_cls: dict[str, str] = {}
        self.delay_local: list[float] = []
        self.delay_global: list[float] = []
        self.global_reflected: set[str] = set()
        self.acc_windows: dict[tuple[str, int], list[int]] = {}
        self.acc_correct = 0
        self.acc_total = 0
        self.camera_frames = 0
        self.plans_emitted = 0
        self.plan_violations: list[str] = []
        self.plan_log: list[tuple[float, SignalPlan]] = []
        self.snapshots: list[dict] = []  # per-sync global twin dumps, kept when tracing
        self.violations: list[str] = []
        self.dr = {"checks": 0, "max_error": 0.0, "max_ratio": 0.0, "violations": 0}

        learning = sc.topology == SVFDT
        self.processors: dict[str, RegionProcessor] = {}
        self.sensor_region: dict[str, str] = {}
        for e in sc.edges:
            host = f"edge:{e.id}" if sc.topology == SVFDT else "cloud"
            self.processors[e.id] = RegionProcessor(self, e, host, learning)
            for sid in e.sensors:
                self.sensor_region[sid] = e.id
        self.cloud = CloudNode([e.id for e in sc.edges], sc.sync)
        self._sync_generation = 0

        if sc.topology == SVFDT:
            for e in sc.edges:
                self.net.attach(f"edge:{e.id}", self._on_edge(e.id))
        self.net.attach("cloud", self._on_cloud)
        for iid in self.layout.intersection_ids:
            self.net.attach(f"sig:{iid}", self._on_signal)

    # -- plumbing -------------------------------------------------------------------------------------

    def send(self, kind: str, size: int, src: str, dst: str, payload) -> None:
        self.net.send(Message(kind, size, self.loop.now, src, dst, payload))

    def _row(self, event: str, link: str = "", kind: str = "", delay: float = 0.0, entity: str = "",
             t: float | None = None) -> None:
        if self.record_trace:
            self.trace.append(TraceRow(self.loop.now if t is None else t, event, link, kind, 0, delay, 0, entity))

    def _hub_for_sensor(self, sid: str) -> str:
        return f"edge:{self.sensor_region[sid]}" if self.sc.topology == SVFDT else "cloud"

    def _on_edge(self, region: str):
        proc = self.processors[region]

        def handle(msg: Message, now: float) -> None:
            if msg.kind in (RAW_FRAME, DETECTIONS):
                ref = msg.payload
                proc.receive(ref.sensor, ref.tick, ref.world, now)
            elif msg.kind == GLOBAL_PARAMS:
                proc.node.apply_global_params(msg.payload)
        return handle

    def _on_cloud(self, msg: Message, now: float) -> None:
        if msg.kind == TRAFFIC_PROGRAM:
            self.cloud.receive_program(msg.payload)
        elif msg.kind == AGENT_PARAMS:
            self._params_arrived(msg.payload, now)
        elif msg.kind in (RAW_FRAME, DETECTIONS):
            ref = msg.payload
            if self.sc.topology == SVFDT:  # cannot happen: the link policy rejects it at send time
                self.violations.append(f"{msg.kind} reached the cloud in svfdt")
            self.processors[self.sensor_region[ref.sensor]].receive(ref.sensor, ref.tick, ref.world, now)

    def _on_signal(self, msg: Message, now: float) -> None:
        plan: SignalPlan = msg.payload
        self.plans[plan.intersection] = plan
        self._row("plan_applied", plan.intersection, SIGNAL_PLAN)

    # -- metrics hooks -----------------------------------------------------------------------------------

    def record_accuracy(self, sid: str, t: float, detections) -> None:
        self.camera_frames += 1
        if not detections:
            return
        correct = sum(1 for d in detections if d.correct)
        key = (sid, int(t))
        w = self.acc_windows.get(key)
        if w is None:
            w = self.acc_windows[key] = [0, 0]
        w[0] += correct
        w[1] += len(detections)
        self.acc_correct += correct
        self.acc_total += len(detections)

    def reflect_local(self, eid: str, now: float, region: str) -> None:
        d = now - self.spawn_time[eid]
        self.delay_local.append(d)
        self._row("reflect_local", region, self.spawn_cls[eid], d, eid)
        if self.check_invariants and d <= 0:
            self.violations.append(f"non-positive mirroring delay for {eid}")

    def plan_emitted(self, plan: SignalPlan, problems: list[str]) -> None:
        self.plans_emitted += 1
        self.plan_log.append((self.loop.now, plan))
        self.plan_violations.extend(f"{plan.intersection}@{self.loop.now:.1f}: {p}" for p in problems)
        self._row("plan", plan.intersection, SIGNAL_PLAN)

    # -- world tick ---------------------------------------------------------------------------------------

    def _demand(self, t: float):
        if not self.sc.demand_schedule:
            return self.sc.densities[self.sc.density]
        return self.sc.densities[self.sc.density_at(t)]

    def _tick(self, k: int) -> None:
        sc = self.sc
        t = k / sc.tick_rate
        if k > 0:
            prev = self.world
            self.world = step(prev, self.plans)
            self.flowlog.record(self.world.events)
            for e in self.world.events:
                if e.kind == "cross":
                    self._row("cross", e.intersection, e.cls, entity=e.agent)
                elif e.kind == "violation":
                    self._row("violation", e.intersection, e.cls, entity=e.agent)
            if self.check_invariants:
                self._check_step(prev, self.world)
        if self.check_dr:
            self._check_dead_reckoning(t)
        world = self.world
        for sid in sorted(self.sensors):
            spec = self.sensors[sid]
            if k % max(1, round(sc.tick_rate / spec.frame_rate)):
                continue
            src = sensor_node(spec)
            dst = self._hub_for_sensor(sid)
            if spec.kind == CAMERA:
                self.send(RAW_FRAME, frame_size(spec), src, dst, FrameRef(sid, k, world))
            else:
                dets = observe(spec, world, 0, 0.0, self.sensor_rng[sid])
                self.send(DETECTIONS, HEADER_BYTES + ITEM_BYTES * len(dets), src, dst, FrameRef(sid, k, dets))
        before = len(world.events)
        self.world = spawn_traffic(self._demand(t), world, self.world_rng)
        for e in self.world.events[before:]:
            self.spawn_time[e.agent] = e.time
            self.spawn_cls[e.agent] = e.cls
            self._row("spawn", e.intersection, e.cls, entity=e.agent)
        if k < self.n_ticks:
            self.loop.schedule((k + 1) / sc.tick_rate, self._tick, k + 1)

    def _check_step(self, prev, cur) -> None:
        if len(cur.agents) != cur.spawned - cur.departed:
            self.violations.append(f"conservation broken at tick {cur.tick}")
        dt = 1.0 / cur.tick_rate
        for aid, a in cur.agents.items():
            b = prev.agents.get(aid)
            if b is None:
                continue
            a_max = cur.models[a.cls].max_accel
            disp = math.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1])
            if disp > (b.speed + a_max * dt) * dt + 1e-9:
                self.violations.append(f"teleport of {aid} at tick {cur.tick}: {disp:.3f} m")
        for e in cur.events:
            if e.kind == "violation":
                self.violations.append(f"compliant {e.cls} {e.agent} entered against a conflicting green at {e.time:.2f}s")

    def _check_dead_reckoning(self, t: float) -> None:
        truth = self.world.agents
        v_max, a_max = self.sc.dead_reckoning_v_max, self.sc.dead_reckoning_a_max
        for proc in self.processors.values():
            for eid, ent in proc.node.twin.entities.items():
                a = truth.get(eid)
                if a is None or not a.obeys or ent.cls != a.cls:
                    continue
                gap = t - ent.last_update
                dx, dy = heading_vector(ent.heading)
                x = ent.position[0] + ent.speed * gap * dx
                y = ent.position[1] + ent.speed * gap * dy
                err = math.hypot(x - a.position[0], y - a.position[1])
                bound = dead_reckoning_bound(gap, v_max, a_max) + ROUNDING_SLACK + 0.005 * gap
                self.dr["checks"] += 1
                if err > self.dr["max_error"]:
                    self.dr["max_error"] = err
                ratio = err / bound
                if ratio > self.dr["max_ratio"]:
                    self.dr["max_ratio"] = ratio
                if err > bound:
                    self.dr["violations"] += 1

    # -- windows, params and sync ---------------------------------------------------------------------------

    def _window(self, w: int) -> None:
        W = self.sc.flow_window
        start, end = (w - 1) * W, w * W
        for region in sorted(self.processors):
            proc = self.processors[region]
            estimates = proc.close_window(start, end)
            if self.sc.topology == SVFDT:
                self.send(AGENT_PARAMS, HEADER_BYTES + ITEM_BYTES * len(estimates), proc.host, "cloud", estimates)
            else:
                self._params_arrived(estimates, self.loop.now)
        if (w + 1) * W <= self.sc.duration + 1e-9:
            self.loop.schedule((w + 1) * W, self._window, w + 1)

    def _params_arrived(self, estimates, now: float) -> None:
        if self.cloud.receive_params(estimates, now):
            self._sync("change")

    def _periodic(self, generation: int) -> None:
        if generation == self._sync_generation:
            self._sync("periodic")

    def _sync(self, reason: str) -> None:
        now = self.loop.now
        state = self.cloud.sync(now, reason)
        self._row("sync", "cloud", reason)
        if self.record_trace:
            self.snapshots.append({"time": now, "reason": reason, **state.to_dict()})
        for region in sorted(state.regions):
            snap = state.regions[region]
            for eid in sorted(snap.entities):
                if eid in self.spawn_time and eid not in self.global_reflected:
                    self.global_reflected.add(eid)
                    d = now - self.spawn_time[eid]
                    self.delay_global.append(d)
                    self._row("reflect_global", region, self.spawn_cls[eid], d, eid)
            if self.check_invariants and now - snap.as_of > self.sc.sync.period + self._max_program_transit() + 2.0 / self.sc.tick_rate:
                self.violations.append(f"region {region} snapshot stale by {now - snap.as_of:.3f}s at {now:.3f}s")
        if self.sc.topology == SVFDT:
            broadcast_params(state.params, [f"edge:{e.id}" for e in self.sc.edges],
                             lambda node, p: self.send(GLOBAL_PARAMS, HEADER_BYTES + ITEM_BYTES * max(1, len(p)),
                                                       "cloud", node, p))
        else:
            for proc in self.processors.values():
                proc.node.apply_global_params(state.params)
        self._sync_generation += 1
        nxt = now + self.sc.sync.period
        if nxt <= self.sc.duration + 1e-9:
            self.loop.schedule(nxt, self._periodic, self._sync_generation)

    def _max_program_transit(self) -> float:
        if self.sc.topology != SVFDT:
            return max(e.compute_delay for e in self.sc.edges) + 1.0 / self.sc.tick_rate
        t = self.sc.network.edge_cloud
        sigma = 0.1 * t.latency if t.jitter.sigma is None else t.jitter.sigma
        return t.latency + 6 * sigma + max(e.compute_delay for e in self.sc.edges) + 1.0 / self.sc.tick_rate + 0.05

    # -- run ----------------------------------------------------------------------------------------------

    def run(self) -> MetricsReport:
        sc = self.sc
        self.loop.schedule(0.0, self._tick, 0)
        self.loop.schedule(sc.flow_window, self._window, 1)
        self.loop.schedule(sc.sync.period, self._periodic, 0)
        try:
            self.loop.run(until=sc.duration)
        except PolicyViolation as e:
            self.violations.append(f"policy violation: {e}")
            raise InvariantViolation(str(e)) from e
        if self.record_trace and sc.topology == SVFDT:
            leaked = audit_privacy(self.trace)
            if any(leaked.values()):
                self.violations.append(f"privacy audit: {leaked}")
        return self.report()

    def report(self) -> MetricsReport:
        sc = self.sc
        flows = {}
        for iid in self.layout.intersection_ids:
            v, p = flow_counts(self.flowlog, iid, sc.duration, end=sc.duration)
            flows[iid] = {"vehicle": v, "pedestrian": p}
        windows = [c / n for (c, n) in (self.acc_windows[k] for k in sorted(self.acc_windows))]
        pooled = self.acc_correct / self.acc_total if self.acc_total else None
        bytes_ = {f"{lc}/{kind}": b for (lc, kind), b in sorted(self.net.bytes_by.items())}
        msgs = {f"{lc}/{kind}": n for (lc, kind), n in sorted(self.net.count_by.items())}
        reasons: dict[str, int] = {}
        for _, r in self.cloud.state.syncs:
            reasons[r] = reasons.get(r, 0) + 1
        return MetricsReport(
            framework=sc.topology, seed=sc.seed, density=sc.density, control=sc.control, duration=sc.duration,
            delay_local=summarize(self.delay_local, 1000.0),
            delay_global=summarize(self.delay_global, 1000.0),
            accuracy=summarize(windows, 100.0, pooled),
            detections=self.acc_total,
            flows=flows, bytes=bytes_, messages=msgs, camera_frames=self.camera_frames,
            syncs=self.cloud.state.sync_count, sync_reasons=reasons, change_triggers=len(self.cloud.triggers),
            plans=self.plans_emitted, plan_violations=len(self.plan_violations),
            dead_reckoning=dict(self.dr) if self.check_dr else {},
            spawned=self.world.spawned,
            invariant_violations=list(self.violations[:50]),
        )
