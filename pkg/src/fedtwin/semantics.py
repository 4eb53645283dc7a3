"""Semantic records, redundancy elimination, and the traffic-code language.

Traffic code is line oriented; each line holds one command::

    program := line*
    line    := ref "." method "(" args? ")" ";"
    ref     := classname digits
    args    := literal ("," literal)*
    literal := quoted string | decimal number

Refs are program-local names ("vehicle1") bound to entity ids by ``spawn`` or ``setID``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

CLASSES = ("vehicle", "pedestrian", "signal", "weather")
AGENT_CLASSES = ("vehicle", "pedestrian")
ATTRIBUTES = ("position", "speed", "heading", "phase", "condition")

# method -> argument types ("s" string, "n" number)
METHODS: dict[str, tuple[str, ...]] = {
    "spawn": ("s",),
    "setID": ("s",),
    "setClass": ("s",),
    "setPosition": ("n", "n"),
    "setSpeed": ("n",),
    "setHeading": ("n",),
    "setPhase": ("s",),
    "setWeather": ("s",),
    "despawn": (),
}
METHOD_ORDER = {m: i for i, m in enumerate(METHODS)}
ATTRIBUTE_METHOD = {
    "position": "setPosition",
    "speed": "setSpeed",
    "heading": "setHeading",
    "phase": "setPhase",
    "condition": "setWeather",
}


# -- records -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class SemanticRecord:
    cls: str
    id: str
    attributes: dict = field(default_factory=dict)
    timestamp: float = 0.0
    removed: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.cls not in CLASSES:
            out.append(f"unknown class {self.cls!r}")
        if self.cls in AGENT_CLASSES and not self.id:
            out.append("empty id")
        if not isinstance(self.timestamp, (int, float)) or self.timestamp < 0:
            out.append("negative timestamp")
        for k, v in self.attributes.items():
            if k not in ATTRIBUTES:
                out.append(f"attribute {k!r} not in schema")
            elif k == "position":
                if not (isinstance(v, tuple) and len(v) == 2 and all(_is_num(c) for c in v)):
                    out.append("position must be an (x, y) pair")
            elif k in ("speed", "heading"):
                if not _is_num(v):
                    out.append(f"{k} must be numeric")
                elif k == "speed" and v < 0:
                    out.append("speed must be >= 0")
            elif not isinstance(v, str):
                out.append(f"{k} must be a string")
        return out


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _q(x: float, digits: int) -> float:
    return round(x, digits) + 0.0  # + 0.0 folds -0.0


def quantize_heading(h: float) -> float:
    return _q(round(h % 360.0, 1) % 360.0, 1)


def encode(estimates: Iterable, t: float) -> list[SemanticRecord]:
    """One record per fused estimate, rounded to schema precision (cm, 0.01 m/s, 0.1 deg)."""
    out = []
    headings: dict[float, float] = {}
    for e in estimates:
        h = headings.get(e.heading)
        if h is None:
            h = headings[e.heading] = quantize_heading(e.heading)
        x, y = e.position
        out.append(SemanticRecord(
            e.cls, e.id,
            {"position": (round(x, 2) + 0.0, round(y, 2) + 0.0),
             "speed": round(e.speed, 2) + 0.0 if e.speed > 0 else 0.0,
             "heading": h},
            t,
        ))
    return out


# -- redundancy elimination -------------------------------------------------------------------------


@dataclass(frozen=True)
class Tolerances:
    position: float = 1.0
    speed: float = 0.5
    heading: float = 5.0


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _gap(attr: str, a, b) -> float:
    """Distance between two attribute values; inf for any change of a categorical value."""
    if attr == "position":
        return math.hypot(a[0] - b[0], a[1] - b[1])
    if attr == "speed":
        return abs(a - b)
    if attr == "heading":
        return _angle_gap(a, b)
    return 0.0 if a == b else math.inf


def _limit(eps: Tolerances, attr: str) -> float:
    return getattr(eps, attr, 0.0)


def dedupe(current: Sequence[SemanticRecord], previous, eps: Tolerances = Tolerances()) -> list[SemanticRecord]:
    """Drop records that carry nothing new.

    A record is emitted for a new id, or when any attribute (or the class) moved more than its
    tolerance from the last emitted value; the emitted record then carries every attribute that
    differs at all, so the receiver is exact as of that timestamp.  Removal records always pass.
    """
    if not isinstance(previous, Mapping):
        previous = {r.id: r for r in previous}
    out = []
    for r in current:
        prev = previous.get(r.id)
        if r.removed:
            if prev is not None:
                out.append(r)
            continue
        if prev is None:
            out.append(r)
            continue
        changed = {}
        exceeded = r.cls != prev.cls
        for k, v in r.attributes.items():
            old = prev.attributes.get(k)
            if old is None:
                changed[k] = v
                exceeded = True
                continue
            g = _gap(k, v, old)
            if g > 0:
                changed[k] = v
                if g > _limit(eps, k):
                    exceeded = True
        if exceeded:
            out.append(SemanticRecord(r.cls, r.id, changed, r.timestamp))
    return out


def remember(memory: dict[str, SemanticRecord], emitted: Iterable[SemanticRecord]) -> None:
    """Fold emitted records into the last-emitted state (in place)."""
    for r in emitted:
        if r.removed:
            memory.pop(r.id, None)
            continue
        prev = memory.get(r.id)
        attrs = dict(prev.attributes) if prev is not None else {}
        attrs.update(r.attributes)
        memory[r.id] = SemanticRecord(r.cls, r.id, attrs, r.timestamp)


# -- programs ----------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Command:
    ref: str
    method: str
    args: tuple = ()
    timestamp: float = 0.0


@dataclass(frozen=True)
class TrafficProgram:
    commands: tuple[Command, ...] = ()
    region: str = ""
    timestamp: float = 0.0

    def __len__(self) -> int:
        return len(self.commands)


class CompileError(ValueError):
    pass


_REF_RE = re.compile(r"([A-Za-z]+)(\d+)$")


def ref_key(ref: str) -> tuple[str, int]:
    m = _REF_RE.match(ref)
    if not m:
        return ref, 0
    return m.group(1), int(m.group(2))


def compile_records(records: Sequence[SemanticRecord], known: Mapping[str, str] | None = None,
                    region: str = "", timestamp: float | None = None) -> TrafficProgram:
    """Translate records into a traffic program.

    Refs are class name + ordinal in first-seen order.  With ``known`` (id -> current class)
    ids absent from it are created with ``spawn`` and class changes emit ``setClass``; without
    it every entity is addressed through ``setID``.
    """
    if not records:
        return TrafficProgram((), region, 0.0 if timestamp is None else timestamp)
    ts = records[0].timestamp if timestamp is None else timestamp
    for r in records:
        bad = r.problems()
        if bad:
            raise CompileError(f"record {r.cls}:{r.id!r} violates schema: {', '.join(bad)}")
        if r.timestamp != records[0].timestamp:
            raise CompileError(f"record {r.cls}:{r.id!r} has timestamp {r.timestamp}, expected {records[0].timestamp}")
    counters: dict[str, int] = {}
    refs: dict[tuple[str, str], tuple[str, tuple[str, int]]] = {}
    keyed = []  # (sort key, command); every command shares the timestamp ts

    def add(ref, rkey, method, args):
        keyed.append(((rkey, METHOD_ORDER[method]), Command(ref, method, args, ts)))

    for r in records:
        key = (r.cls, r.id)
        entry = refs.get(key)
        if entry is None:
            n = counters[r.cls] = counters.get(r.cls, 0) + 1
            entry = refs[key] = (f"{r.cls}{n}", (r.cls, n))
        ref, rkey = entry
        if r.removed:
            add(ref, rkey, "setID", (r.id,))
            add(ref, rkey, "despawn", ())
            continue
        if known is not None and r.id not in known:
            add(ref, rkey, "spawn", (r.id,))
        else:
            add(ref, rkey, "setID", (r.id,))
            if known is not None and known[r.id] != r.cls:
                add(ref, rkey, "setClass", (r.cls,))
        attrs = r.attributes
        for attr in ATTRIBUTES:
            if attr in attrs:
                v = attrs[attr]
                if attr == "position":
                    args = (float(v[0]), float(v[1]))
                elif attr in ("speed", "heading"):
                    args = (float(v),)
                else:
                    args = (v,)
                add(ref, rkey, ATTRIBUTE_METHOD[attr], args)
    keyed.sort(key=lambda kc: kc[0])
    return TrafficProgram(tuple(c for _, c in keyed), region, ts)


# -- text form ----------------------------------------------------------------------------------------


def format_number(x: float) -> str:
    s = f"{float(x):.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _format_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_command(c: Command) -> str:
    args = ",".join(_format_string(a) if isinstance(a, str) else format_number(a) for a in c.args)
    return f"{c.ref}.{c.method}({args});"


def serialize(program: TrafficProgram) -> str:
    return "".join(format_command(c) + "\n" for c in program.commands)


class TrafficCodeError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class TrafficSyntaxError(TrafficCodeError):
    pass


class UnknownMethodError(TrafficCodeError):
    pass


class ArityError(TrafficCodeError):
    pass


class ArgumentTypeError(TrafficCodeError):
    pass


_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[.(),;])
""", re.VERBOSE)


def _tokens(line: str, lineno: int):
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if not m:
            raise TrafficSyntaxError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            yield kind, m.group(), pos + 1
        pos = m.end()


def _unquote(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s[1:-1])


def parse(text: str, region: str = "", timestamp: float = 0.0) -> TrafficProgram:
    """Parse traffic-code text; errors carry the 1-based line and column."""
    cmds = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        toks = list(_tokens(line, lineno))
        if not toks:
            continue
        i = 0

        def expect(kind, value=None):
            nonlocal i
            if i >= len(toks):
                col = len(line) + 1
                raise TrafficSyntaxError(f"expected {value or kind}, found end of line", lineno, col)
            k, v, col = toks[i]
            if k != kind or (value is not None and v != value):
                raise TrafficSyntaxError(f"expected {value or kind}, found {v!r}", lineno, col)
            i += 1
            return v, col

        ref, rcol = expect("ident")
        m = _REF_RE.match(ref)
        if not m or m.group(1) not in CLASSES:
            raise TrafficSyntaxError(f"bad entity ref {ref!r}", lineno, rcol)
        expect("punct", ".")
        method, mcol = expect("ident")
        expect("punct", "(")
        args, cols = [], []
        if i < len(toks) and toks[i][1] != ")":
            while True:
                if i >= len(toks):
                    raise TrafficSyntaxError("unterminated argument list", lineno, len(line) + 1)
                k, v, col = toks[i]
                if k == "number":
                    args.append(float(v))
                elif k == "string":
                    args.append(_unquote(v))
                else:
                    raise TrafficSyntaxError(f"expected literal, found {v!r}", lineno, col)
                cols.append(col)
                i += 1
                if i < len(toks) and toks[i][1] == ",":
                    i += 1
                    continue
                break
        expect("punct", ")")
        expect("punct", ";")
        if i != len(toks):
            raise TrafficSyntaxError(f"unexpected {toks[i][1]!r} after command", lineno, toks[i][2])
        sig = METHODS.get(method)
        if sig is None:
            raise UnknownMethodError(f"unknown method {method!r}", lineno, mcol)
        if len(args) != len(sig):
            raise ArityError(f"{method} takes {len(sig)} argument(s), got {len(args)}", lineno, mcol)
        for a, want, col in zip(args, sig, cols):
            if (want == "s") != isinstance(a, str):
                raise ArgumentTypeError(
                    f"{method} expects a {'string' if want == 's' else 'number'} argument", lineno, col)
        cmds.append(Command(ref, method, tuple(args), timestamp))
    return TrafficProgram(tuple(cmds), region, timestamp)


def program_size(program: TrafficProgram) -> int:
    return len(serialize(program).encode("utf-8"))


# -- twin state and interpreter ---------------------------------------------------------------------


@dataclass(slots=True)
class TwinEntity:
    id: str
    cls: str
    position: tuple[float, float] = (0.0, 0.0)
    speed: float = 0.0
    heading: float = 0.0
    last_update: float = 0.0
    phase: str | None = None
    condition: str | None = None
    params: dict = field(default_factory=dict)

    def copy(self) -> "TwinEntity":
        return TwinEntity(self.id, self.cls, self.position, self.speed, self.heading, self.last_update,
                          self.phase, self.condition, dict(self.params))

    def to_dict(self) -> dict:
        d = {"id": self.id, "class": self.cls, "position": list(self.position), "speed": self.speed,
             "heading": self.heading, "last_update": self.last_update}
        if self.phase is not None:
            d["phase"] = self.phase
        if self.condition is not None:
            d["condition"] = self.condition
        return d


class TwinState:
    """A mirrored world replica: entity id -> TwinEntity."""

    def __init__(self, region: str = "", entities: dict[str, TwinEntity] | None = None,
                 last_program: float = 0.0):
        self.region = region
        self.entities: dict[str, TwinEntity] = entities if entities is not None else {}
        self.last_program = last_program
        self.anomalies = 0

    def copy(self) -> "TwinState":
        return TwinState(self.region, {k: e.copy() for k, e in self.entities.items()}, self.last_program)

    def to_dict(self) -> dict:
        return {"region": self.region, "last_program": self.last_program,
                "entities": [self.entities[k].to_dict() for k in sorted(self.entities)]}

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def agents(self) -> dict[str, TwinEntity]:
        return {k: e for k, e in self.entities.items() if e.cls in AGENT_CLASSES}


def execute(program: TrafficProgram, twin: TwinState) -> TwinState:
    """Apply commands in order; mutates and returns `twin`."""
    bound: dict[str, str] = {}
    ts = program.timestamp
    ents = twin.entities
    for c in program.commands:
        if c.method == "spawn":
            cls = ref_key(c.ref)[0]
            eid = c.args[0]
            if eid in ents:
                log.debug("spawn of existing entity %s", eid)
                twin.anomalies += 1
            else:
                ents[eid] = TwinEntity(eid, cls, last_update=ts)
            bound[c.ref] = eid
            ents[eid].last_update = ts
            continue
        if c.method == "setID":
            eid = c.args[0]
            bound[c.ref] = eid
            if eid not in ents:
                cls = ref_key(c.ref)[0]
                log.debug("implicit spawn of %s via setID", eid)
                twin.anomalies += 1
                ents[eid] = TwinEntity(eid, cls, last_update=ts)
            ents[eid].last_update = ts
            continue
        eid = bound.get(c.ref)
        if eid is None:
            eid = bound[c.ref] = c.ref
            log.debug("unbound ref %s used as its own id", c.ref)
        ent = ents.get(eid)
        if c.method == "despawn":
            ents.pop(eid, None)
            continue
        if ent is None:
            log.debug("implicit spawn of %s", eid)
            ent = ents[eid] = TwinEntity(eid, ref_key(c.ref)[0], last_update=ts)
            twin.anomalies += 1
        m = c.method
        if m == "setPosition":
            ent.position = (c.args[0], c.args[1])
        elif m == "setSpeed":
            ent.speed = c.args[0]
        elif m == "setHeading":
            ent.heading = c.args[0]
        elif m == "setClass":
            ent.cls = c.args[0]
        elif m == "setPhase":
            ent.phase = c.args[0]
        elif m == "setWeather":
            ent.condition = c.args[0]
        ent.last_update = ts
    if program.commands:
        twin.last_program = ts
    return twin
