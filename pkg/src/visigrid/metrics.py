"""Detection status, TV/FV/TI/FI classification, rates and coverage."""
from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .geometry import OrientedRect, SensorPose, in_fov
from .sensors import BoundingBox2D, BoundingBox3D, Homography, Measurement

TIME_EPS = 1e-6


@dataclass(frozen=True)
class ObjectState:
    id: str
    t: float
    x: float
    y: float
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5
    label: str = "car"

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(f"object {self.id}: extent must be positive")

    def footprint(self) -> OrientedRect:
        return OrientedRect(self.x, self.y, self.yaw, self.length, self.width)

    def box_row(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.length, self.width, self.height, 0.0])

    def radial_speed(self, sensor: SensorPose, px: float, py: float, pz: float) -> float:
        """Velocity component along the line from the sensor to (px, py, pz); positive receding."""
        d = np.array([px - sensor.x, py - sensor.y, pz - sensor.z])
        n = np.linalg.norm(d)
        if n == 0:
            return 0.0
        return float((self.vx * d[0] + self.vy * d[1]) / n)


@dataclass(frozen=True)
class AssociationTolerance:
    position_radius: float = 1.0
    doppler_tolerance: float = 1.0
    mode: str = "radar"

    def __post_init__(self):
        if self.position_radius <= 0 or self.doppler_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.mode not in ("radar", "camera"):
            raise ValueError(f"unknown association mode {self.mode!r}")


class Outcome(str, enum.Enum):
    TV = "TV"
    FV = "FV"
    TI = "TI"
    FI = "FI"


@dataclass
class ConfusionCounts:
    tv: int = 0
    fv: int = 0
    ti: int = 0
    fi: int = 0

    def __post_init__(self):
        if min(self.tv, self.fv, self.ti, self.fi) < 0:
            raise ValueError("confusion counts must be non-negative")

    def add(self, outcome: Outcome, n: int = 1):
        key = outcome.value.lower()
        setattr(self, key, getattr(self, key) + n)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tv + other.tv, self.fv + other.fv, self.ti + other.ti, self.fi + other.fi)

    @property
    def total(self) -> int:
        return self.tv + self.fv + self.ti + self.fi

    def as_dict(self) -> dict:
        return {"tv": self.tv, "fv": self.fv, "ti": self.ti, "fi": self.fi}


@dataclass(frozen=True)
class Rates:
    tvr: Optional[float]
    fvr: Optional[float]
    fir: Optional[float]
    tir: Optional[float]

    def as_dict(self) -> dict:
        return {"tvr": self.tvr, "fvr": self.fvr, "fir": self.fir, "tir": self.tir}


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    rates: Rates
    coverage_rate: Optional[float]
    events: list = field(default_factory=list)
    per_object: dict = field(default_factory=dict)
    per_step: dict = field(default_factory=dict)

    @property
    def tvr(self):
        return self.rates.tvr

    @property
    def fvr(self):
        return self.rates.fvr

    @property
    def fir(self):
        return self.rates.fir

    @property
    def tir(self):
        return self.rates.tir


def classify(v_o: bool, d_o: bool) -> Outcome:
    if v_o:
        return Outcome.TV if d_o else Outcome.FV
    return Outcome.FI if d_o else Outcome.TI


def _ratio(num: int, den: int, exact: bool):
    if den == 0:
        return None
    return Fraction(num, den) if exact else num / den


def rates(c: ConfusionCounts, exact: bool = False) -> Rates:
    """Per-class rates; ``None`` where the denominator is zero.

    With ``exact=True`` the rates are :class:`fractions.Fraction` values.
    """
    vis, inv = c.tv + c.fi, c.fv + c.ti
    return Rates(_ratio(c.tv, vis, exact), _ratio(c.fv, inv, exact),
                 _ratio(c.fi, vis, exact), _ratio(c.ti, inv, exact))


# --------------------------------------------------------------------------
# detection status


def _radar_detected(obj: ObjectState, frame: Sequence[Measurement], tol: AssociationTolerance,
                    sensor: Optional[SensorPose]) -> bool:
    if not frame:
        return False
    pts = np.array([m.xyz(sensor) for m in frame], float)
    near = obj.footprint().distance(pts[:, 0], pts[:, 1]) <= tol.position_radius
    if not near.any():
        return False
    if sensor is None:
        raise ValueError("radar association needs the sensor pose for the radial speed")
    d = pts - sensor.position
    n = np.linalg.norm(d, axis=1)
    n[n == 0] = 1.0
    radial = (obj.vx * d[:, 0] + obj.vy * d[:, 1]) / n
    dop = np.array([m.doppler for m in frame])
    return bool(np.any(near & (np.abs(dop - radial) <= tol.doppler_tolerance)))


def _ground_trace(det, homography: Optional[Homography], n: int = 17) -> np.ndarray:
    """Ground points a detection stands on: the projected bottom edge of a 2D
    box, or the centre of a 3D box."""
    if isinstance(det, BoundingBox3D):
        return np.array([[det.x, det.y]])
    if isinstance(det, BoundingBox2D):
        if homography is None:
            raise ValueError("camera association of 2D boxes needs a ground homography")
        return np.array([homography.apply(u, det.v_max) for u in np.linspace(det.u_min, det.u_max, n)])
    raise TypeError(f"cannot associate {type(det).__name__} in camera mode")


def detection_status(obj: ObjectState, frame: Sequence, tol: AssociationTolerance,
                     sensor: Optional[SensorPose] = None, homography: Optional[Homography] = None) -> bool:
    """D_O: does at least one measurement (or detection box) associate with ``obj``?"""
    if tol.mode == "radar":
        return _radar_detected(obj, frame, tol, sensor)
    fp = obj.footprint()
    for det in frame:
        try:
            pts = _ground_trace(det, homography)
        except ValueError:
            continue
        if np.any(fp.distance(pts[:, 0], pts[:, 1]) <= tol.position_radius):
            return True
    return False


def object_in_fov(obj: ObjectState, sensor: SensorPose, n: int = 5) -> bool:
    """True iff some point of the footprint (n x n lattice incl. edges) lies in the ground FoV wedge."""
    s = np.linspace(-0.5, 0.5, n)
    u, v = np.meshgrid(s * obj.length, s * obj.width, indexing="ij")
    c, si = math.cos(obj.yaw), math.sin(obj.yaw)
    x = obj.x + c * u - si * v
    y = obj.y + si * u + c * v
    return bool(np.any(in_fov(sensor, x, y)))


def coverage_rate(objects: Sequence[Sequence[ObjectState]], frames: Sequence[Sequence], sensor: SensorPose,
                  tol: AssociationTolerance, homography: Optional[Homography] = None) -> Optional[float]:
    """Mean detection status over in-FoV (object, step) pairs; ``None`` when there are none."""
    if len(objects) != len(frames):
        raise ValueError("objects and frames must have the same number of steps")
    hits = total = 0
    for objs, frame in zip(objects, frames):
        for o in objs:
            if object_in_fov(o, sensor):
                total += 1
                hits += detection_status(o, frame, tol, sensor, homography)
    return hits / total if total else None


def _check_alignment(outputs, objects, frames, eps=TIME_EPS):
    if not (len(outputs) == len(objects) == len(frames)):
        raise ValueError(f"timeseries lengths differ: {len(outputs)} grids, "
                         f"{len(objects)} object frames, {len(frames)} measurement frames")
    bad = []
    for k, (vis, objs, frame) in enumerate(zip(outputs, objects, frames)):
        t = vis.t
        if any(abs(o.t - t) > eps for o in objs) or any(
                isinstance(m, Measurement) and abs(m.timestamp - t) > eps for m in frame):
            bad.append(k)
    if bad:
        head = ", ".join(str(k) for k in bad[:20])
        more = f" (+{len(bad) - 20} more)" if len(bad) > 20 else ""
        raise ValueError(f"misaligned timestamps in frames {head}{more}")


def evaluate_run(outputs, objects, frames, tol: AssociationTolerance, vis_threshold: float = 0.5,
                 sensor: Optional[SensorPose] = None, homography: Optional[Homography] = None) -> MetricsReport:
    """Classify every in-FoV (object, step) pair and accumulate the report.

    ``outputs`` are visibility grids carrying their timestamp in ``t``;
    ``objects`` and ``frames`` are per-step lists aligned with them.
    """
    from .visibility import object_visibility

    if sensor is None:
        raise ValueError("evaluate_run needs the sensor pose")
    _check_alignment(outputs, objects, frames)
    counts = ConfusionCounts()
    per_object = defaultdict(ConfusionCounts)
    per_step = defaultdict(ConfusionCounts)
    events = []
    detected = 0
    for vis, objs, frame in zip(outputs, objects, frames):
        for o in objs:
            if not object_in_fov(o, sensor):
                continue
            try:
                v_o = object_visibility(vis, o, vis_threshold)
            except ValueError:
                continue
            d_o = detection_status(o, frame, tol, sensor, homography)
            out = classify(v_o, d_o)
            counts.add(out)
            per_object[o.id].add(out)
            per_step[vis.t].add(out)
            events.append((vis.t, o.id, out.value))
            detected += d_o
    cov = detected / counts.total if counts.total else None
    return MetricsReport(counts, rates(counts), cov, events, dict(per_object), dict(per_step))
