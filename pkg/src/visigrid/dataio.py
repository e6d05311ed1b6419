"""File formats: measurement logs, trajectory labels, grid snapshots, reports.

Measurement and label files are JSON lines whose first line is a header
``{"format": ..., "version": ...}``. Grid snapshots are binary::

    b"VGRD" | u16 version | u32 header length | JSON header |
    u16 values (little endian, value * 65535 rounded) | packed bool mask

Reports are a single JSON document; undefined rates are ``null``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import GridSpec2D, PolarGridSpec, SphericalGridSpec, VoxelGridSpec
from .metrics import ConfusionCounts, MetricsReport, ObjectState, rates
from .sensors import BoundingBox2D, Measurement

MEASUREMENT_FORMAT = "visigrid.measurements"
LABEL_FORMAT = "visigrid.labels"
REPORT_FORMAT = "visigrid.report"
GRID_MAGIC = b"VGRD"
VERSION = 1
QUANT = 65535


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class VersionError(DataError):
    pass


def _check_header(obj, fmt: str, where: str):
    if not isinstance(obj, dict) or obj.get("format") != fmt:
        raise DataError(f"{where}: expected a {fmt} header")
    if obj.get("version") != VERSION:
        raise VersionError(f"{where}: unsupported {fmt} version {obj.get('version')!r} (expected {VERSION})")


def _read_jsonl(path, fmt: str):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file, missing header")
    records = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: malformed JSON ({exc.msg})") from None
        if n == 1:
            _check_header(obj, fmt, f"{path}:1")
            header = obj
        else:
            records.append((n, obj))
    return header, records


def _write_jsonl(path, header: dict, records):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# measurement logs


@dataclass
class MeasurementLog:
    """Frames of radar measurements and/or camera boxes, one timestamp per frame."""

    times: list
    frames: list
    sensor_id: str = "sensor0"

    def __post_init__(self):
        if len(self.times) != len(self.frames):
            raise DataError("times and frames differ in length")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise DataError("frame timestamps must be non-decreasing")

    def __len__(self):
        return len(self.frames)


_MEAS_FIELDS = [f.name for f in fields(Measurement)]
_BOX_FIELDS = [f.name for f in fields(BoundingBox2D)]


def _item_to_json(item) -> dict:
    if isinstance(item, Measurement):
        d = {k: getattr(item, k) for k in _MEAS_FIELDS if getattr(item, k) is not None}
        d["type"] = "point"
        return d
    if isinstance(item, BoundingBox2D):
        d = {k: getattr(item, k) for k in _BOX_FIELDS if getattr(item, k) is not None}
        d["type"] = "box2d"
        return d
    raise TypeError(f"cannot serialise {type(item).__name__}")


def _item_from_json(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind == "point":
        return Measurement(**d)
    if kind == "box2d":
        return BoundingBox2D(**d)
    raise DataError(f"unknown item type {kind!r}")


def save_measurement_log(path, log: MeasurementLog):
    records = [{"t": t, "sensor": log.sensor_id, "items": [_item_to_json(m) for m in frame]}
               for t, frame in zip(log.times, log.frames)]
    _write_jsonl(path, {"format": MEASUREMENT_FORMAT, "version": VERSION, "sensor": log.sensor_id}, records)


def load_measurement_log(path) -> MeasurementLog:
    header, records = _read_jsonl(path, MEASUREMENT_FORMAT)
    times, frames = [], []
    for n, rec in records:
        try:
            t = float(rec["t"])
            items = [_item_from_json(d) for d in rec["items"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{n}: bad frame record ({exc})") from None
        if times and t < times[-1]:
            raise DataError(f"{path}:{n}: timestamp {t} decreases")
        times.append(t)
        frames.append(items)
    return MeasurementLog(times, frames, header.get("sensor", "sensor0"))


# --------------------------------------------------------------------------
# labels


@dataclass
class LabelTrack:
    """A drawn trajectory: knots (t, x, y), linear in between."""

    id: str
    knots: np.ndarray
    label: str = "car"
    extent: Optional[tuple] = None

    def __post_init__(self):
        self.knots = np.asarray(self.knots, float).reshape(-1, 3)
        if len(self.knots) < 2:
            raise DataError(f"track {self.id}: needs at least two knots")
        if np.any(np.diff(self.knots[:, 0]) <= 0):
            raise DataError(f"track {self.id}: knot times must be strictly increasing")
        if self.extent is not None:
            self.extent = tuple(float(v) for v in self.extent)
            if len(self.extent) != 3 or min(self.extent) <= 0:
                raise DataError(f"track {self.id}: extent must be three positive numbers")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[0, 0]), float(self.knots[-1, 0])


@dataclass
class LabelFile:
    tracks: list = field(default_factory=list)

    def validate(self) -> list[str]:
        """Warnings for format-legal but suspicious tracks (stationary ones)."""
        out = []
        for tr in self.tracks:
            if np.allclose(tr.knots[:, 1:], tr.knots[0, 1:]):
                out.append(f"track {tr.id}: stationary object")
        return out


def save_labels(path, labels: LabelFile):
    recs = [{"id": tr.id, "class": tr.label, "extent": list(tr.extent) if tr.extent else None,
             "knots": tr.knots.tolist()} for tr in labels.tracks]
    _write_jsonl(path, {"format": LABEL_FORMAT, "version": VERSION}, recs)


def load_labels(path) -> LabelFile:
    _, records = _read_jsonl(path, LABEL_FORMAT)
    tracks = []
    for n, rec in records:
        try:
            tracks.append(LabelTrack(str(rec["id"]), rec["knots"], rec.get("class", "car"), rec.get("extent")))
        except DataError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{n}: bad label record ({exc})") from None
    return LabelFile(tracks)


def labels_to_objects(labels: LabelFile, times: Sequence[float],
                      defaults: Mapping[str, tuple[float, float, float]]) -> list[list[ObjectState]]:
    """Per-frame object states interpolated from the label polylines.

    Velocity is the slope of the active segment (the later one at a knot,
    except at the final knot); yaw follows the direction of travel.
    """
    out = []
    for t in times:
        t = float(t)
        frame = []
        for tr in labels.tracks:
            k = tr.knots
            if t < k[0, 0] or t > k[-1, 0]:
                continue
            s = min(int(np.searchsorted(k[:, 0], t, side="right")) - 1, len(k) - 2)
            (t0, x0, y0), (t1, x1, y1) = k[s], k[s + 1]
            a = (t - t0) / (t1 - t0)
            vx, vy = (x1 - x0) / (t1 - t0), (y1 - y0) / (t1 - t0)
            yaw = math.atan2(vy, vx) if (vx or vy) else 0.0
            ext = tr.extent or defaults.get(tr.label)
            if ext is None:
                raise DataError(f"track {tr.id}: no extent and no default for class {tr.label!r}")
            frame.append(ObjectState(tr.id, t, float(x0 + a * (x1 - x0)), float(y0 + a * (y1 - y0)), yaw,
                                     float(vx), float(vy), 0.0, *ext, label=tr.label))
        out.append(frame)
    return out


def labels_from_objects(objects: Sequence[Sequence[ObjectState]], knot_interval: Optional[float] = None) -> LabelFile:
    """Polylines through the per-frame states: first and last appearance plus
    a knot every ``knot_interval`` seconds in between."""
    seen: dict[str, list[ObjectState]] = {}
    for frame in objects:
        for o in frame:
            seen.setdefault(o.id, []).append(o)
    tracks = []
    for oid, states in seen.items():
        if len(states) < 2:
            continue
        keep = [states[0]]
        for s in states[1:-1]:
            if knot_interval is not None and s.t - keep[-1].t >= knot_interval - 1e-9:
                keep.append(s)
        keep.append(states[-1])
        o = states[0]
        tracks.append(LabelTrack(oid, [(s.t, s.x, s.y) for s in keep], o.label, (o.length, o.width, o.height)))
    return LabelFile(tracks)


# --------------------------------------------------------------------------
# grid snapshots

_SPEC_KINDS = {"cartesian": GridSpec2D, "spherical": SphericalGridSpec, "polar": PolarGridSpec,
               "voxel": VoxelGridSpec}


def spec_to_dict(spec) -> dict:
    for kind, cls in _SPEC_KINDS.items():
        if type(spec) is cls:
            return {"kind": kind, **asdict(spec)}
    raise TypeError(f"unknown grid spec {type(spec).__name__}")


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _SPEC_KINDS:
        raise DataError(f"unknown grid kind {kind!r}")
    if kind == "voxel":
        d["base"] = GridSpec2D(**d["base"])
    return _SPEC_KINDS[kind](**d)


@dataclass
class GridSnapshot:
    spec: object
    values: np.ndarray
    mask: Optional[np.ndarray] = None
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != tuple(self.spec.shape):
            raise DataError("snapshot values do not match the spec shape")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise DataError("snapshot values must lie in [0, 1]")
        self.mask = np.ones(self.values.shape, bool) if self.mask is None else np.asarray(self.mask, bool)
        if self.mask.shape != self.values.shape:
            raise DataError("snapshot mask does not match the spec shape")


def save_grid(path, snap: GridSnapshot):
    header = json.dumps({"spec": spec_to_dict(snap.spec), "t": snap.t, "meta": snap.meta},
                        sort_keys=True).encode()
    q = np.round(snap.values * QUANT).astype("<u2")
    with Path(path).open("wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<HI", VERSION, len(header)) + header)
        fh.write(q.tobytes(order="C"))
        fh.write(np.packbits(snap.mask.ravel()).tobytes())


def load_grid(path) -> GridSnapshot:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise DataError(f"{path}: not a grid snapshot")
    if len(raw) < 10:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise VersionError(f"{path}: unsupported snapshot version {version} (expected {VERSION})")
    try:
        header = json.loads(raw[10:10 + hlen])
        spec = spec_from_dict(header["spec"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad snapshot header ({exc})") from None
    n = int(np.prod(spec.shape))
    off = 10 + hlen
    nmask = (n + 7) // 8
    if len(raw) != off + 2 * n + nmask:
        raise DataError(f"{path}: payload length {len(raw) - off} does not match spec ({2 * n + nmask})")
    values = np.frombuffer(raw, "<u2", n, off).astype(float).reshape(spec.shape) / QUANT
    mask = np.unpackbits(np.frombuffer(raw, np.uint8, nmask, off + 2 * n))[:n].astype(bool).reshape(spec.shape)
    return GridSnapshot(spec, values, mask, header.get("t", 0.0), header.get("meta", {}))


# --------------------------------------------------------------------------
# reports


@dataclass
class ReportFile:
    report: MetricsReport
    config: dict = field(default_factory=dict)


def _counts_from(d, where) -> ConfusionCounts:
    try:
        return ConfusionCounts(int(d["tv"]), int(d["fv"]), int(d["ti"]), int(d["fi"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad confusion counts ({exc})") from None


def report_to_dict(rf: ReportFile) -> dict:
    r = rf.report
    return {
        "format": REPORT_FORMAT,
        "version": VERSION,
        "config": rf.config,
        "counts": r.counts.as_dict(),
        "rates": r.rates.as_dict(),
        "coverage_rate": r.coverage_rate,
        "events": [[t, oid, cls] for t, oid, cls in r.events],
        "per_object": {k: v.as_dict() for k, v in r.per_object.items()},
        "per_step": [[t, c.as_dict()] for t, c in r.per_step.items()],
    }


def save_report(path, rf: ReportFile):
    Path(path).write_text(json.dumps(report_to_dict(rf), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_report(path) -> ReportFile:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})") from None
    _check_header(d, REPORT_FORMAT, str(path))
    counts = _counts_from(d.get("counts"), path)
    r = rates(counts)
    stored = d.get("rates", {})
    for k, v in r.as_dict().items():
        got = stored.get(k)
        if (got is None) != (v is None) or (v is not None and got != v):
            raise DataError(f"{path}: rate {k}={got!r} inconsistent with counts (expected {v!r})")
    events = [(float(t), str(i), str(c)) for t, i, c in d.get("events", [])]
    per_object = {k: _counts_from(v, path) for k, v in d.get("per_object", {}).items()}
    per_step = {float(t): _counts_from(c, path) for t, c in d.get("per_step", [])}
    rep = MetricsReport(counts, r, d.get("coverage_rate"), events, per_object, per_step)
    return ReportFile(rep, d.get("config", {}))
