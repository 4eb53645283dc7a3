"""Discrete-event message transport.

Links serialize one message at a time (non-preemptive priority, FIFO within a class), then
add propagation latency and a jitter sample.  Multi-hop routes are store-and-forward.
Every hop is checked against the topology's per-link kind policy; a violation raises.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

RAW_FRAME = "RawFrame"
DETECTIONS = "Detections"
SEMANTIC_RECORDS = "SemanticRecords"
TRAFFIC_PROGRAM = "TrafficProgram"
AGENT_PARAMS = "AgentParams"
GLOBAL_PARAMS = "GlobalParams"
SIGNAL_PLAN = "SignalPlan"
KINDS = (RAW_FRAME, DETECTIONS, SEMANTIC_RECORDS, TRAFFIC_PROGRAM, AGENT_PARAMS, GLOBAL_PARAMS, SIGNAL_PLAN)

PRIORITY = {
    SIGNAL_PLAN: 0,
    GLOBAL_PARAMS: 0,
    TRAFFIC_PROGRAM: 1,
    AGENT_PARAMS: 1,
    DETECTIONS: 1,
    SEMANTIC_RECORDS: 1,
    RAW_FRAME: 2,
}

SVFDT = "svfdt"
TERMINAL_SERVER = "terminal-server"
FRAMEWORKS = (SVFDT, TERMINAL_SERVER)

HEADER_BYTES = 16


class PolicyViolation(RuntimeError):
    """A message kind was routed over a link whose policy forbids it."""


class EventLoop:
    """Events ordered by (time, sequence number)."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0.0

    def schedule(self, t: float, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def run(self, until: float = float("inf")) -> None:
        heap = self._heap
        while heap and heap[0][0] <= until:
            t, _, fn, args = heapq.heappop(heap)
            self.now = t
            fn(*args)

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class JitterSpec:
    kind: str = "normal"  # normal (truncated at 0) | uniform | none
    sigma: float | None = None  # default: 10% of latency
    low: float = 0.0
    high: float = 0.0

    def sample(self, latency: float, rng: random.Random) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high)
        sigma = 0.1 * latency if self.sigma is None else self.sigma
        if sigma <= 0:
            return 0.0
        return max(0.0, rng.gauss(0.0, sigma))


@dataclass
class LinkSpec:
    src: str
    dst: str
    bandwidth: float
    latency: float
    jitter: JitterSpec = field(default_factory=JitterSpec)
    loss_prob: float = 0.0
    allowed: frozenset = frozenset(KINDS)

    def validate(self) -> list[str]:
        errors = []
        where = f"link {self.src}->{self.dst}"
        if self.bandwidth <= 0:
            errors.append(f"{where}: bandwidth must be > 0")
        if self.latency < 0:
            errors.append(f"{where}: latency must be >= 0")
        if not 0 <= self.loss_prob < 1:
            errors.append(f"{where}: loss_prob must be in [0, 1)")
        if self.jitter.kind == "uniform" and not 0 <= self.jitter.low <= self.jitter.high:
            errors.append(f"{where}: uniform jitter needs 0 <= low <= high")
        if self.jitter.kind not in ("normal", "uniform", "none"):
            errors.append(f"{where}: unknown jitter kind {self.jitter.kind!r}")
        return errors


@dataclass(slots=True)
class Message:
    kind: str
    size_bytes: int
    created_at: float
    src: str
    dst: str
    payload: object = None
    id: int = 0

    @property
    def priority(self) -> int:
        return PRIORITY[self.kind]


class TraceRow(NamedTuple):
    time: float
    event: str  # send | deliver | drop | spawn | reflect_local | reflect_global | sync
    link: str
    kind: str
    bytes: int
    delay: float
    msg: int
    entity: str


TRACE_COLUMNS = TraceRow._fields
TRACE_VERSION = "trace_v1"


def role(node: str) -> str:
    return node.split(":", 1)[0]


def link_class(src: str, dst: str) -> str:
    return f"{role(src)}->{role(dst)}"


@dataclass
class Topology:
    name: str
    nodes: list[str]
    links: list[LinkSpec]
    routes: dict[tuple[str, str], list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self._adj: dict[str, list[str]] = {}
        for l in self.links:
            self._adj.setdefault(l.src, []).append(l.dst)

    def route(self, src: str, dst: str) -> list[str]:
        key = (src, dst)
        if key not in self.routes:
            self.routes[key] = self._bfs(src, dst)
        return self.routes[key]

    def _bfs(self, src: str, dst: str) -> list[str]:
        prev = {src: None}
        q = deque([src])
        while q:
            n = q.popleft()
            if n == dst:
                break
            for m in self._adj.get(n, ()):
                if m not in prev:
                    prev[m] = n
                    q.append(m)
        if dst not in prev:
            raise PolicyViolation(f"no route from {src} to {dst} in topology {self.name}")
        path = [dst]
        while path[-1] != src:
            path.append(prev[path[-1]])
        return path[::-1]


class Link:
    def __init__(self, spec: LinkSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self.queue: list = []  # heap of (priority, seq, msg, enqueued_at, path, hop)
        self._seq = 0
        self.busy = False
        self.bytes_sent = 0

    @property
    def name(self) -> str:
        return f"{self.spec.src}->{self.spec.dst}"

    def tx_time(self, size_bytes: int) -> float:
        return size_bytes * 8.0 / self.spec.bandwidth

    def priority_enqueue(self, msg: Message, at: float, path: list[str] | None = None, hop: int = 0) -> int:
        """Queue `msg`; returns its position among waiting messages (0 = next to transmit)."""
        key = (msg.priority, self._seq)
        self._seq += 1
        heapq.heappush(self.queue, (key[0], key[1], msg, at, path, hop))
        return sum(1 for item in self.queue if (item[0], item[1]) < key)


class Network:
    def __init__(self, loop: EventLoop, topology: Topology, rng_for: Callable[[str], random.Random] | None = None,
                 record_trace: bool = True):
        self.loop = loop
        self.topology = topology
        rng_for = rng_for or (lambda name: random.Random(name))
        self.links = {(l.src, l.dst): Link(l, rng_for(f"{l.src}->{l.dst}")) for l in topology.links}
        self.handlers: dict[str, Callable[[Message, float], None]] = {}
        self.record_trace = record_trace
        self.trace: list[TraceRow] = []
        self.bytes_by: dict[tuple[str, str], int] = {}  # offered per hop, keyed (link class, kind)
        self.count_by: dict[tuple[str, str], int] = {}
        self.delivered = 0
        self.dropped = 0
        self._ids = 0

    def attach(self, node: str, handler: Callable[[Message, float], None]) -> None:
        self.handlers[node] = handler

    def send(self, msg: Message, at: float | None = None) -> int:
        """Route `msg` from msg.src to msg.dst; returns the message id.  Raises PolicyViolation
        before anything is queued if any hop forbids the message kind."""
        if msg.size_bytes <= 0:
            raise ValueError("message size must be positive")
        at = self.loop.now if at is None else at
        path = self.topology.route(msg.src, msg.dst)
        for a, b in zip(path, path[1:]):
            spec = self.links[(a, b)].spec
            if msg.kind not in spec.allowed:
                raise PolicyViolation(f"{msg.kind} not allowed on link {a}->{b} ({self.topology.name})")
        self._ids += 1
        msg.id = self._ids
        msg.created_at = at
        self._enqueue(msg, path, 0, at)
        return msg.id

    def _enqueue(self, msg: Message, path: list[str], hop: int, at: float) -> None:
        link = self.links[(path[hop], path[hop + 1])]
        key = (link_class(link.spec.src, link.spec.dst), msg.kind)
        self.bytes_by[key] = self.bytes_by.get(key, 0) + msg.size_bytes
        self.count_by[key] = self.count_by.get(key, 0) + 1
        if self.record_trace:
            self.trace.append(TraceRow(at, "send", link.name, msg.kind, msg.size_bytes, 0.0, msg.id, ""))
        link.priority_enqueue(msg, at, path, hop)
        if not link.busy:
            self._start(link)

    def _start(self, link: Link) -> None:
        if not link.queue:
            link.busy = False
            return
        _, _, msg, _, path, hop = heapq.heappop(link.queue)
        link.busy = True
        end = self.loop.now + link.tx_time(msg.size_bytes)
        self.loop.schedule(end, self._tx_done, link, msg, path, hop)

    def _tx_done(self, link: Link, msg: Message, path: list[str], hop: int) -> None:
        now = self.loop.now
        spec = link.spec
        link.bytes_sent += msg.size_bytes
        if spec.loss_prob > 0 and link.rng.random() < spec.loss_prob:
            self.dropped += 1
            if self.record_trace:
                self.trace.append(TraceRow(now, "drop", link.name, msg.kind, msg.size_bytes, 0.0, msg.id, ""))
        else:
            arrive = now + spec.latency + spec.jitter.sample(spec.latency, link.rng)
            self.loop.schedule(arrive, self._arrive, link, msg, path, hop)
        self._start(link)

    def _arrive(self, link: Link, msg: Message, path: list[str], hop: int) -> None:
        now = self.loop.now
        if hop + 2 < len(path):
            self._enqueue(msg, path, hop + 1, now)
            return
        self.delivered += 1
        if self.record_trace:
            self.trace.append(TraceRow(now, "deliver", link.name, msg.kind, msg.size_bytes,
                                       now - msg.created_at, msg.id, ""))
        handler = self.handlers.get(msg.dst)
        if handler is not None:
            handler(msg, now)


def send_once(spec: LinkSpec, size_bytes: int, at: float = 0.0, kind: str = RAW_FRAME, seed: int = 0) -> float | None:
    """Delivery time of a single message over an idle link (None when lost)."""
    loop = EventLoop()
    topo = Topology("single", [spec.src, spec.dst], [spec])
    net = Network(loop, topo, rng_for=lambda name: random.Random(f"{seed}:{name}"))
    got: list[float] = []
    net.attach(spec.dst, lambda m, t: got.append(t))
    loop.now = at
    net.send(Message(kind, size_bytes, at, spec.src, spec.dst))
    loop.run()
    return got[0] if got else None


def audit_privacy(trace: Iterable[TraceRow]) -> dict[str, int]:
    """RawFrame / Detections bytes carried on any edge->cloud link."""
    out = {RAW_FRAME: 0, DETECTIONS: 0}
    for r in trace:
        if r.event == "send" and r.kind in out:
            src, dst = r.link.split("->")
            if role(src) == "edge" and role(dst) == "cloud":
                out[r.kind] += r.bytes
    return out


def cloud_inbox_kinds(trace: Iterable[TraceRow]) -> set[str]:
    return {r.kind for r in trace if r.event == "deliver" and r.link.split("->")[1] == "cloud"}
