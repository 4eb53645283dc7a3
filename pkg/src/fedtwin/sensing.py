"""Cameras and radars observing the ground truth, plus inverse-variance fusion."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .world import PEDESTRIAN, VEHICLE, WorldState

CAMERA = "camera"
RADAR = "radar"


@dataclass
class SensorSpec:
    id: str
    kind: str
    coverage: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    frame_rate: float = 30.0
    bitrate: float = 10e6
    base_accuracy: float = 0.9
    position_noise_sigma: float = 0.2
    speed_noise_sigma: float = 0.3
    learning_gain: float = 0.05
    learning_frames: float = 1000.0
    staleness_penalty: float = 0.02  # per second of frame age

    def validate(self) -> list[str]:
        errors = []
        where = f"sensor {self.id}"
        if self.kind not in (CAMERA, RADAR):
            errors.append(f"{where}: kind must be camera or radar")
        if self.frame_rate <= 0:
            errors.append(f"{where}: frame_rate must be > 0")
        if self.kind == CAMERA and self.bitrate <= 0:
            errors.append(f"{where}: cameras need bitrate > 0")
        if not 0 < self.base_accuracy <= 1:
            errors.append(f"{where}: base_accuracy must be in (0, 1]")
        if self.position_noise_sigma < 0 or self.speed_noise_sigma < 0:
            errors.append(f"{where}: noise sigmas must be >= 0")
        if not 0 <= self.learning_gain < 1:
            errors.append(f"{where}: learning gain must be in [0, 1)")
        if self.base_accuracy + self.learning_gain > 1 + 1e-12:
            errors.append(f"{where}: base_accuracy + learning_gain must be <= 1")
        if self.learning_frames <= 0:
            errors.append(f"{where}: learning_frames must be > 0")
        if self.staleness_penalty < 0:
            errors.append(f"{where}: staleness_penalty must be >= 0")
        x0, y0, x1, y1 = self.coverage
        if not (x1 > x0 and y1 > y0):
            errors.append(f"{where}: coverage must be a non-empty box")
        return errors

    def covers(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.coverage
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(slots=True)
class Detection:
    sensor: str
    true_id: str
    cls: str
    position: tuple[float, float]
    speed: float
    heading: float
    timestamp: float
    correct: bool
    position_sigma: float = 0.0
    speed_sigma: float = 0.0


@dataclass(frozen=True)
class FramePayload:
    sensor: str
    timestamp: float
    size_bytes: int


@dataclass(slots=True)
class FusedEstimate:
    id: str
    cls: str
    position: tuple[float, float]
    speed: float
    heading: float
    timestamp: float
    position_var: float = 0.0
    speed_var: float = 0.0


def frame_size(sensor: SensorSpec) -> int:
    return int(round(sensor.bitrate / sensor.frame_rate / 8.0))


def frame_payload(sensor: SensorSpec, timestamp: float) -> FramePayload:
    if sensor.kind != CAMERA:
        raise ValueError(f"{sensor.id} is not a camera")
    return FramePayload(sensor.id, timestamp, frame_size(sensor))


def detection_probability(sensor: SensorSpec, frames_processed: float, age: float) -> float:
    learned = 1.0 - math.exp(-frames_processed / sensor.learning_frames) if frames_processed > 0 else 0.0
    p = min(1.0, sensor.base_accuracy + sensor.learning_gain * learned) - sensor.staleness_penalty * age
    return min(1.0, max(0.0, p))


_OTHER = {VEHICLE: PEDESTRIAN, PEDESTRIAN: VEHICLE}


def sensor_rng(seed: int, sensor_id: str) -> np.random.Generator:
    """Independent, reproducible random stream for one sensor."""
    return np.random.default_rng([seed, zlib.crc32(sensor_id.encode())])


def observe(sensor: SensorSpec, world: WorldState, frames_processed: float, age: float,
            rng: np.random.Generator) -> list[Detection]:
    """Noisy detections of every agent inside the sensor's coverage box.

    Each in-coverage agent consumes exactly two uniforms and three normals, so streams stay
    aligned regardless of outcomes.
    """
    if age < 0:
        raise ValueError("age must be >= 0")
    p = detection_probability(sensor, frames_processed, age)
    sp, ss = sensor.position_noise_sigma, sensor.speed_noise_sigma
    x0, y0, x1, y1 = sensor.coverage
    inside = [a for a in world.agents.values()
              if x0 <= a.position[0] <= x1 and y0 <= a.position[1] <= y1]
    if not inside:
        return []
    n = len(inside)
    u = rng.random(2 * n).tolist()
    z = rng.standard_normal(3 * n).tolist()
    t = world.time
    sid = sensor.id
    out = []
    for i, a in enumerate(inside):
        if u[2 * i] >= p:
            continue
        correct = u[2 * i + 1] < p
        x, y = a.position
        v = a.speed
        if sp > 0:
            x += sp * z[3 * i]
            y += sp * z[3 * i + 1]
        if ss > 0:
            v += ss * z[3 * i + 2]
            if v < 0.0:
                v = 0.0
        out.append(Detection(sid, a.id, a.cls if correct else _OTHER[a.cls], (x, y), v,
                             a.heading, t, correct, sp, ss))
    return out


class FusionError(ValueError):
    pass


def _weighted(values: Sequence[float], sigmas: Sequence[float]) -> tuple[float, float]:
    exact = [v for v, s in zip(values, sigmas) if s == 0]
    if exact:
        return sum(exact) / len(exact), 0.0
    w = [1.0 / (s * s) for s in sigmas]
    total = sum(w)
    return sum(v * wi for v, wi in zip(values, w)) / total, 1.0 / total


def fuse(detections: Sequence[Detection]) -> FusedEstimate:
    """Inverse-variance combination of concurrent detections of one agent."""
    if not detections:
        raise FusionError("cannot fuse an empty detection group")
    ts = detections[0].timestamp
    if len(detections) == 1:
        d = detections[0]
        return FusedEstimate(d.true_id, d.cls, d.position, d.speed, d.heading, ts,
                             d.position_sigma ** 2, d.speed_sigma ** 2)
    if any(d.timestamp != ts for d in detections):
        raise FusionError("detections in a fusion group must share one timestamp")
    ordered = sorted(detections, key=lambda d: d.sensor)
    psig = [d.position_sigma for d in ordered]
    if all(psig):
        wsum = x = y = 0.0
        for d, sg in zip(ordered, psig):
            w = 1.0 / (sg * sg)
            wsum += w
            x += w * d.position[0]
            y += w * d.position[1]
        x, y, pvar = x / wsum, y / wsum, 1.0 / wsum
    else:
        x, pvar = _weighted([d.position[0] for d in ordered], psig)
        y, _ = _weighted([d.position[1] for d in ordered], psig)
    v, vvar = _weighted([d.speed for d in ordered], [d.speed_sigma for d in ordered])
    votes: dict[str, int] = {}
    for d in ordered:
        votes[d.cls] = votes.get(d.cls, 0) + 1
    top = max(votes.values())
    cls = next(d.cls for d in ordered if votes[d.cls] == top)
    return FusedEstimate(ordered[0].true_id, cls, (x, y), v, ordered[0].heading, ts, pvar, vvar)


def fuse_all(detections: Iterable[Detection]) -> list[FusedEstimate]:
    """Group by true id and fuse each group; output sorted by id.

    Equivalent to ``[fuse(g) for g in groups]``; groups whose sigmas are all positive take an
    inlined path because this runs for every agent on every frame.
    """
    groups: dict[str, list[Detection]] = {}
    for d in detections:
        g = groups.get(d.true_id)
        if g is None:
            groups[d.true_id] = [d]
        else:
            g.append(d)
    out = []
    for k in sorted(groups):
        g = groups[k]
        if len(g) == 1 or not all(d.position_sigma > 0 and d.speed_sigma > 0 for d in g):
            out.append(fuse(g))
            continue
        ts = g[0].timestamp
        if any(d.timestamp != ts for d in g):
            raise FusionError("detections in a fusion group must share one timestamp")
        g.sort(key=lambda d: d.sensor)
        wp = ws = x = y = v = 0.0
        votes: dict[str, int] = {}
        for d in g:
            w = 1.0 / (d.position_sigma * d.position_sigma)
            wp += w
            x += w * d.position[0]
            y += w * d.position[1]
            w = 1.0 / (d.speed_sigma * d.speed_sigma)
            ws += w
            v += w * d.speed
            votes[d.cls] = votes.get(d.cls, 0) + 1
        if len(votes) == 1:
            cls = g[0].cls
        else:
            top = max(votes.values())
            cls = next(d.cls for d in g if votes[d.cls] == top)
        out.append(FusedEstimate(g[0].true_id, cls, (x / wp, y / wp), v / ws, g[0].heading, ts,
                                 1.0 / wp, 1.0 / ws))
    return out
