"""Scenario configuration: dataclasses, JSON (de)serialization, validation, canonical map."""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cloud import SyncPolicy
from .control import Constraints
from .netsim import FRAMEWORKS, SVFDT, JitterSpec
from .semantics import Tolerances
from .sensing import CAMERA, RADAR, SensorSpec
from .world import (
    AgentModel,
    Approach,
    Crosswalk,
    DemandConfig,
    Intersection,
    MapSpec,
    default_pedestrian_model,
)

SCHEMA_VERSION = 1
CONTROL_MODES = ("adaptive", "fixed")


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid scenario:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


@dataclass
class LinkTemplate:
    bandwidth: float
    latency: float
    jitter: JitterSpec = field(default_factory=JitterSpec)
    loss_prob: float = 0.0


@dataclass
class NetworkConfig:
    end_edge: LinkTemplate = field(default_factory=lambda: LinkTemplate(1e9, 0.001))
    edge_cloud: LinkTemplate = field(default_factory=lambda: LinkTemplate(200e6, 0.020))
    cloud_edge: LinkTemplate = field(default_factory=lambda: LinkTemplate(200e6, 0.020))
    edge_signal: LinkTemplate = field(default_factory=lambda: LinkTemplate(1e9, 0.001))


@dataclass
class EdgeConfig:
    id: str
    sensors: list[str]
    intersections: list[str]
    compute_delay: float = 0.005


@dataclass
class DemandStep:
    time: float
    density: str


@dataclass
class Scenario:
    map: MapSpec
    densities: dict[str, DemandConfig]
    sensors: list[SensorSpec]
    edges: list[EdgeConfig]
    name: str = "scenario"
    density: str = "medium"
    demand_schedule: list[DemandStep] = field(default_factory=list)
    topology: str = SVFDT
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sync: SyncPolicy = field(default_factory=SyncPolicy)
    control: str = "adaptive"
    constraints: Constraints = field(default_factory=Constraints)
    tolerances: Tolerances = field(default_factory=Tolerances)
    vehicle_model: AgentModel = field(default_factory=AgentModel)
    pedestrian_model: AgentModel = field(default_factory=default_pedestrian_model)
    duration: float = 600.0
    seed: int = 1
    tick_rate: float = 30.0
    flow_window: float = 60.0
    stale_timeout: float = 2.0
    weather: str = "clear"
    dead_reckoning_v_max: float = 15.0
    dead_reckoning_a_max: float = 4.0
    version: int = SCHEMA_VERSION

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def density_at(self, t: float) -> str:
        """Density name in force at time t (the latest schedule step with time <= t)."""
        name = self.density
        for step in sorted(self.demand_schedule, key=lambda s: s.time):
            if step.time <= t:
                name = step.density
        return name

    def validate(self) -> list[str]:
        errors = list(self.map.validate())
        approaches = {a.id for i in self.map.intersections for a in i.approaches}
        crosswalks = {c.id for c in self.map.crosswalks}
        intersections = {i.id for i in self.map.intersections}
        if not self.densities:
            errors.append("densities: at least one density config is required")
        for name, d in self.densities.items():
            for a, r in d.vehicles.items():
                if a not in approaches:
                    errors.append(f"densities.{name}.vehicles: unknown approach {a!r}")
                if not (isinstance(r, (int, float)) and r >= 0 and math.isfinite(r)):
                    errors.append(f"densities.{name}.vehicles.{a}: rate must be a finite number >= 0")
            for c, r in d.pedestrians.items():
                if c not in crosswalks:
                    errors.append(f"densities.{name}.pedestrians: unknown crosswalk {c!r}")
                if not (isinstance(r, (int, float)) and r >= 0 and math.isfinite(r)):
                    errors.append(f"densities.{name}.pedestrians.{c}: rate must be a finite number >= 0")
        if self.density not in self.densities:
            errors.append(f"density: {self.density!r} is not one of {sorted(self.densities)}")
        for step in self.demand_schedule:
            if step.density not in self.densities:
                errors.append(f"demand_schedule: unknown density {step.density!r}")
            if not 0 <= step.time <= self.duration:
                errors.append(f"demand_schedule: step time {step.time} outside [0, duration]")
        sensor_ids = [s.id for s in self.sensors]
        if len(set(sensor_ids)) != len(sensor_ids):
            errors.append("sensors: ids are not unique")
        for s in self.sensors:
            errors.extend(s.validate())
            if s.frame_rate > self.tick_rate or abs(self.tick_rate / s.frame_rate - round(self.tick_rate / s.frame_rate)) > 1e-9:
                errors.append(f"sensor {s.id}: tick_rate must be an integer multiple of frame_rate")
        edge_ids = [e.id for e in self.edges]
        if not self.edges:
            errors.append("edges: at least one edge node is required")
        if len(set(edge_ids)) != len(edge_ids):
            errors.append("edges: ids are not unique")
        used_sensors: set[str] = set()
        used_inters: set[str] = set()
        for e in self.edges:
            for s in e.sensors:
                if s not in sensor_ids:
                    errors.append(f"edge {e.id}: unknown sensor {s!r}")
                if s in used_sensors:
                    errors.append(f"edge {e.id}: sensor {s!r} already attached to another edge")
                used_sensors.add(s)
            for i in e.intersections:
                if i not in intersections:
                    errors.append(f"edge {e.id}: unknown intersection {i!r}")
                if i in used_inters:
                    errors.append(f"edge {e.id}: intersection {i!r} already served by another edge")
                used_inters.add(i)
            if e.compute_delay < 0:
                errors.append(f"edge {e.id}: compute_delay must be >= 0")
        missing = intersections - used_inters
        if missing:
            errors.append(f"edges: intersections without an edge: {sorted(missing)}")
        if self.topology not in FRAMEWORKS:
            errors.append(f"topology: must be one of {list(FRAMEWORKS)}")
        for name in ("end_edge", "edge_cloud", "cloud_edge", "edge_signal"):
            t = getattr(self.network, name)
            if not t.bandwidth > 0:
                errors.append(f"network.{name}.bandwidth must be > 0")
            if t.latency < 0:
                errors.append(f"network.{name}.latency must be >= 0")
            if not 0 <= t.loss_prob < 1:
                errors.append(f"network.{name}.loss_prob must be in [0, 1)")
            if t.jitter.kind not in ("normal", "uniform", "none"):
                errors.append(f"network.{name}.jitter.kind must be normal, uniform or none")
        errors.extend(self.sync.validate())
        if self.control not in CONTROL_MODES:
            errors.append(f"control: must be one of {list(CONTROL_MODES)}")
        if not self.tick_rate > 0:
            errors.append("tick_rate must be > 0")
        if not self.flow_window > 0:
            errors.append("flow_window must be > 0")
        if not self.duration >= 2 * self.flow_window:
            errors.append("duration must cover at least two flow windows")
        if self.stale_timeout <= 0:
            errors.append("stale_timeout must be > 0")
        for k in ("position", "speed", "heading"):
            if getattr(self.tolerances, k) < 0:
                errors.append(f"tolerances.{k} must be >= 0")
        c = self.constraints
        if c.min_green <= 0 or c.max_cycle <= 0 or c.startup < 0 or c.lost_per_phase < 0:
            errors.append("constraints: min_green, max_cycle > 0 and startup, lost_per_phase >= 0")
        if c.cycle_mode not in ("demand", "fixed"):
            errors.append(f"constraints.cycle_mode must be 'demand' or 'fixed', got {c.cycle_mode!r}")
        if c.saturation_flow <= 0 or not 0 < c.target_saturation <= 1:
            errors.append("constraints: saturation_flow > 0 and 0 < target_saturation <= 1")
        if not 0 < c.demand_smoothing <= 1:
            errors.append("constraints.demand_smoothing must be in (0, 1]")
        return errors

    def check(self) -> "Scenario":
        errors = self.validate()
        if errors:
            raise ScenarioError(errors)
        return self


# -- generic dataclass <-> JSON --------------------------------------------------------------------


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is typing.Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ScenarioError([f"{path}: expected an object"])
        return from_dict(tp, value, path)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ScenarioError([f"{path}: expected a list"])
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ScenarioError([f"{path}: expected a list"])
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ScenarioError([f"{path}: expected {len(args)} items"])
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise ScenarioError([f"{path}: expected an object"])
        return {k: _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if origin is frozenset:
        return frozenset(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError([f"{path}: expected a number"])
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError([f"{path}: expected an integer"])
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ScenarioError([f"{path}: expected a string"])
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ScenarioError([f"{path}: expected true or false"])
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass `cls` from plain JSON data; missing optional fields take defaults."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    errors = [f"{path + '.' if path else ''}{k}: unknown field" for k in data if k not in known]
    kwargs = {}
    for f in dataclasses.fields(cls):
        where = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            try:
                kwargs[f.name] = _convert(hints[f.name], data[f.name], where)
            except ScenarioError as e:
                errors.extend(e.errors)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            errors.append(f"{where}: required field missing")
    if errors:
        raise ScenarioError(errors)
    return cls(**kwargs)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def to_dict(scenario: Scenario) -> dict:
    return _plain(scenario)


def _restore_inf(data):
    if isinstance(data, dict):
        return {k: _restore_inf(v) for k, v in data.items()}
    if isinstance(data, list):
        return [_restore_inf(v) for v in data]
    if data == "inf":
        return math.inf
    if data == "-inf":
        return -math.inf
    return data


def load(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError([f"{path}: not valid JSON ({e})"]) from None
    if not isinstance(data, dict):
        raise ScenarioError([f"{path}: top level must be an object"])
    return from_dict(Scenario, _restore_inf(data))


def dump(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(scenario), indent=2) + "\n")


# -- canonical scenario --------------------------------------------------------------------------------


def canonical_map() -> MapSpec:
    """Two signalized intersections 500 m apart, four crosswalks.

    I1 joins a two-lane 14 m east-west road with a 10 m north-south street; I2 is a
    narrower single-lane crossing.
    """
    i1 = Intersection("I1", (0.0, 0.0), [
        Approach("I1N", 180.0, 1, 10.0),  # arrives from the north, heading south
        Approach("I1S", 0.0, 1, 10.0),
        Approach("I1E", 270.0, 2, 14.0),
        Approach("I1W", 90.0, 2, 14.0),
    ])
    i2 = Intersection("I2", (500.0, 0.0), [
        Approach("I2N", 180.0, 1, 8.0),
        Approach("I2S", 0.0, 1, 8.0),
        Approach("I2E", 270.0, 1, 10.0),
        Approach("I2W", 90.0, 1, 10.0),
    ])
    return MapSpec([i1, i2], [
        Crosswalk("C1", "I1W"),
        Crosswalk("C2", "I1N"),
        Crosswalk("C3", "I2E"),
        Crosswalk("C4", "I2S"),
    ])


def _rates(ns: float, ew: float, ns2: float | None = None, ew2: float | None = None) -> dict[str, float]:
    ns2 = ns if ns2 is None else ns2
    ew2 = ew if ew2 is None else ew2
    return {"I1N": ns, "I1S": ns, "I1E": ew, "I1W": ew, "I2N": ns2, "I2S": ns2, "I2E": ew2, "I2W": ew2}


def canonical_densities() -> dict[str, DemandConfig]:
    peds = lambda r: {c: r for c in ("C1", "C2", "C3", "C4")}  # noqa: E731
    return {
        "light": DemandConfig(_rates(3.0, 4.0), peds(2.0)),
        "medium": DemandConfig(_rates(6.0, 8.0), peds(4.0)),
        # the fixed plan serves about 26.5 veh/min per lane; heavy and asymmetric load the
        # critical lanes beyond that so that demand-proportional splits can make a difference
        "heavy": DemandConfig(_rates(30.0, 16.0, 14.0, 30.0), peds(6.0)),
        "asymmetric": DemandConfig(_rates(5.0, 56.0, 30.0, 5.0), peds(3.0)),
    }


def canonical_sensors() -> list[SensorSpec]:
    out = []
    for iid, (cx, cy) in (("I1", (0.0, 0.0)), ("I2", (500.0, 0.0))):
        out.append(SensorSpec(f"{iid}-camA", CAMERA, (cx - 160, cy - 160, cx + 160, cy + 160)))
        out.append(SensorSpec(f"{iid}-camB", CAMERA, (cx - 60, cy - 60, cx + 60, cy + 60)))
        out.append(SensorSpec(f"{iid}-radar", RADAR, (cx - 160, cy - 160, cx + 160, cy + 160),
                              frame_rate=15.0, bitrate=0.0, base_accuracy=0.95, position_noise_sigma=0.5,
                              speed_noise_sigma=0.1, learning_gain=0.0, staleness_penalty=0.0))
    return out


def canonical_scenario(density: str = "medium", seed: int = 1, topology: str = SVFDT,
                       control: str = "adaptive") -> Scenario:
    sensors = canonical_sensors()
    edges = [
        EdgeConfig("E1", [s.id for s in sensors if s.id.startswith("I1-")], ["I1"]),
        EdgeConfig("E2", [s.id for s in sensors if s.id.startswith("I2-")], ["I2"]),
    ]
    return Scenario(
        map=canonical_map(),
        densities=canonical_densities(),
        sensors=sensors,
        edges=edges,
        name="canonical",
        density=density,
        topology=topology,
        control=control,
        seed=seed,
    )


def perfect_sensors(scenario: Scenario) -> Scenario:
    """Same scenario with noise-free, always-correct sensors."""
    sensors = [dataclasses.replace(s, base_accuracy=1.0, learning_gain=0.0, staleness_penalty=0.0,
                                   position_noise_sigma=0.0, speed_noise_sigma=0.0) for s in scenario.sensors]
    return scenario.replace(sensors=sensors)


def ideal_network(scenario: Scenario) -> Scenario:
    """Zero-latency, effectively infinite-bandwidth links with no jitter, and zero compute delay."""
    t = lambda: LinkTemplate(1e15, 0.0, JitterSpec("none"))  # noqa: E731
    edges = [dataclasses.replace(e, compute_delay=0.0) for e in scenario.edges]
    return scenario.replace(network=NetworkConfig(t(), t(), t(), t()), edges=edges)

