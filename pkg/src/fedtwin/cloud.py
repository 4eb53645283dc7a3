"""Global twin: replace-on-sync region snapshots and federated parameter averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .edge import LocalParamEstimate
from .semantics import TrafficProgram, TwinEntity, TwinState, execute

log = logging.getLogger(__name__)

FLOW_PREFIX = "vehicle_flow:"
PEDESTRIAN_FLOW_PREFIX = "pedestrian_flow:"


@dataclass
class SyncPolicy:
    period: float = 60.0
    change_threshold: float = 0.5
    change_detection: bool = True
    pedestrian_trigger: bool = False  # also watch pedestrian flow (off by default)

    def validate(self) -> list[str]:
        errors = []
        if not self.period > 0:
            errors.append("sync.period must be > 0")
        if not self.change_threshold > 0:
            errors.append("sync.change_threshold must be > 0")
        return errors


@dataclass
class RegionSnapshot:
    entities: dict[str, TwinEntity]
    as_of: float

    def to_dict(self) -> dict:
        return {"as_of": self.as_of, "entities": [self.entities[k].to_dict() for k in sorted(self.entities)]}


@dataclass
class GlobalTwinState:
    regions: dict[str, RegionSnapshot] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    last_sync: float = 0.0
    syncs: list[tuple[float, str]] = field(default_factory=list)

    @property
    def sync_count(self) -> int:
        return len(self.syncs)

    def entity_count(self) -> int:
        return sum(len(s.entities) for s in self.regions.values())

    def to_dict(self) -> dict:
        return {
            "last_sync": self.last_sync,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "regions": {r: self.regions[r].to_dict() for r in sorted(self.regions)},
        }


class UnknownRegionError(KeyError):
    pass


def fedavg(estimates: Iterable[LocalParamEstimate], prior: float | None = None) -> float | None:
    """Sample-weighted mean of regional estimates; `prior` when no region has samples."""
    num = den = 0.0
    for e in estimates:
        if e.n > 0 and math.isfinite(e.value):
            num += e.n * e.value
            den += e.n
    if den <= 0:
        return prior
    return num / den


def detect_change(history: Sequence[float], threshold: float) -> bool:
    """True iff the latest completed window differs from the one before by more than
    `threshold` relative to max(previous, 1)."""
    if len(history) < 2:
        return False
    prev, cur = history[-2], history[-1]
    return abs(cur - prev) / max(prev, 1.0) > threshold


def global_sync(state: GlobalTwinState, twins: Mapping[str, TwinState],
                programs: Mapping[str, Sequence[TrafficProgram]],
                estimates: Sequence[LocalParamEstimate], t: float, reason: str = "periodic") -> GlobalTwinState:
    """Fold the programs accumulated since the last sync into the cloud's region replicas,
    replace each region snapshot, and re-average global parameters.  Mutates `twins` and
    `state` and returns `state`."""
    for region in programs:
        if region not in twins:
            raise UnknownRegionError(f"program from unknown region {region!r}")
    for region in sorted(twins):
        twin = twins[region]
        as_of = state.regions[region].as_of if region in state.regions else 0.0
        for prog in programs.get(region, ()):
            execute(prog, twin)
            as_of = max(as_of, prog.timestamp)
        state.regions[region] = RegionSnapshot({k: e.copy() for k, e in twin.entities.items()}, as_of)
    by_name: dict[str, list[LocalParamEstimate]] = {}
    for e in estimates:
        if e.name.startswith(FLOW_PREFIX) or e.name.startswith(PEDESTRIAN_FLOW_PREFIX):
            continue
        by_name.setdefault(e.name, []).append(e)
    for name in sorted(by_name):
        value = fedavg(by_name[name], state.params.get(name))
        if value is not None:
            state.params[name] = value
    state.last_sync = t
    state.syncs.append((t, reason))
    return state


def broadcast_params(params: Mapping[str, float], edges: Sequence[str], send: Callable[[str, dict], None]) -> int:
    """Send one GlobalParams copy per edge; returns the number of messages."""
    payload = {k: params[k] for k in sorted(params)}
    for node in edges:
        send(node, dict(payload))
    return len(edges)


class CloudNode:
    """Cloud state machine: buffers programs and estimates, syncs on period or change."""

    def __init__(self, regions: Sequence[str], policy: SyncPolicy):
        self.policy = policy
        self.twins = {r: TwinState(r) for r in regions}
        self.pending: dict[str, list[TrafficProgram]] = {r: [] for r in regions}
        self.estimates: list[LocalParamEstimate] = []
        self.state = GlobalTwinState({r: RegionSnapshot({}, 0.0) for r in regions})
        self.flow_history: dict[str, list[float]] = {}
        self.triggers: list[tuple[float, str]] = []

    def receive_program(self, program: TrafficProgram) -> None:
        if program.region not in self.pending:
            raise UnknownRegionError(f"program from unknown region {program.region!r}")
        self.pending[program.region].append(program)

    def receive_params(self, estimates: Iterable[LocalParamEstimate], t: float) -> bool:
        """Store estimates; returns True when a flow change warrants an early sync."""
        changed = False
        for e in estimates:
            watch = e.name.startswith(FLOW_PREFIX) or (
                self.policy.pedestrian_trigger and e.name.startswith(PEDESTRIAN_FLOW_PREFIX))
            if watch:
                hist = self.flow_history.setdefault(e.name, [])
                hist.append(e.value)
                if self.policy.change_detection and detect_change(hist, self.policy.change_threshold):
                    changed = True
                    self.triggers.append((t, e.name))
            else:
                self.estimates.append(e)
        return changed

    def sync(self, t: float, reason: str = "periodic") -> GlobalTwinState:
        global_sync(self.state, self.twins, self.pending, self.estimates, t, reason)
        self.pending = {r: [] for r in self.pending}
        self.estimates = []
        return self.state
