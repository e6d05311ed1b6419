"""Synthetic straight-highway scenes with an exact line-of-sight oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geometry import FovSpec, SensorPose, in_fov
from .metrics import ObjectState
from .sensors import BoundingBox2D, Measurement, PinholeCamera

N_SAMPLES = 64


@dataclass(frozen=True)
class ClassExtent:
    length: tuple[float, float]
    width: tuple[float, float]
    height: tuple[float, float]

    def draw(self, rng) -> tuple[float, float, float]:
        return tuple(float(rng.uniform(lo, hi)) for lo, hi in (self.length, self.width, self.height))


DEFAULT_EXTENTS = {
    "car": ClassExtent((4.0, 5.0), (1.7, 1.9), (1.4, 1.7)),
    "truck": ClassExtent((12.0, 18.0), (2.45, 2.55), (3.6, 4.0)),
}


@dataclass(frozen=True)
class RadarDetectionModel:
    p_detect_visible: float = 1.0
    extra_returns_mean: float = 0.0
    position_sigma: float = 0.0
    doppler_sigma: float = 0.0
    deterministic: bool = True
    clutter_rate: float = 0.0

    def __post_init__(self):
        if not 0 <= self.p_detect_visible <= 1:
            raise ValueError("p_detect_visible must lie in [0, 1]")
        if min(self.extra_returns_mean, self.position_sigma, self.doppler_sigma, self.clutter_rate) < 0:
            raise ValueError("return count, noise and clutter parameters must be non-negative")


@dataclass(frozen=True)
class VehicleSpec:
    """A scripted vehicle: x(t) = x0 + vx * t at fixed y."""

    id: str
    x0: float
    y: float
    vx: float = 0.0
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5
    label: str = "car"


def default_sensor() -> SensorPose:
    fov = FovSpec(150.0, math.radians(20.0), math.radians(-15.0), math.radians(5.0))
    return SensorPose(0.0, -5.25, 6.0, 0.0, 0.0, fov)


@dataclass(frozen=True)
class SceneConfig:
    lanes_per_direction: int = 3
    lane_width: float = 3.5
    duration: float = 60.0
    frame_rate: float = 10.0
    n_vehicles: int = 41
    truck_ratio: float = 0.2
    truck_right_lane_prob: float = 0.8
    extents: dict = field(default_factory=lambda: dict(DEFAULT_EXTENTS))
    speed_range: tuple[float, float] = (22.0, 36.0)
    min_gap: float = 8.0
    road_x: tuple[float, float] = (-10.0, 170.0)
    sensor: SensorPose = field(default_factory=default_sensor)
    seed: int = 0
    radar: RadarDetectionModel = field(default_factory=RadarDetectionModel)
    camera_max_distance: float = 100.0
    vehicles: Optional[tuple] = None
    despawn: bool = True

    def __post_init__(self):
        if self.duration <= 0 or self.frame_rate <= 0:
            raise ValueError("duration and frame_rate must be positive")
        if not 0 <= self.truck_ratio <= 1 or not 0 <= self.truck_right_lane_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.lanes_per_direction < 1 or self.lane_width <= 0:
            raise ValueError("need at least one lane of positive width")
        if self.n_vehicles < 0:
            raise ValueError("n_vehicles must be non-negative")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must satisfy 0 < lo <= hi")
        if self.road_x[0] >= self.road_x[1]:
            raise ValueError("road_x must be increasing")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def lane_center(self, direction: int, lane: int) -> float:
        """Lane 0 is the outer (right-hand) lane of its carriageway."""
        k = self.lanes_per_direction - 1 - lane
        return -direction * (k + 0.5) * self.lane_width


@dataclass
class GroundTruthLog:
    times: np.ndarray
    objects: list
    occluded: list
    measurements: list
    boxes: list
    sensor: SensorPose
    config: Optional[SceneConfig] = None

    @property
    def n_frames(self) -> int:
        return len(self.times)

    def occluded_fraction(self) -> Optional[float]:
        """Share of in-FoV object-frames that the oracle marks occluded."""
        from .metrics import object_in_fov

        hit = total = 0
        for objs, occ in zip(self.objects, self.occluded):
            for o in objs:
                if object_in_fov(o, self.sensor):
                    total += 1
                    hit += occ[o.id]
        return hit / total if total else None


# --------------------------------------------------------------------------
# surface sampling and the oracle


def _face_lattice(a: float, b: float, k: int) -> tuple[np.ndarray, np.ndarray]:
    na = max(1, int(round(math.sqrt(k * a / b))))
    nb = max(1, int(round(k / na)))
    u = (np.arange(na) + 0.5) / na - 0.5
    v = (np.arange(nb) + 0.5) / nb - 0.5
    uu, vv = np.meshgrid(u * a, v * b, indexing="ij")
    return uu.ravel(), vv.ravel()


def facing_samples(obj: ObjectState, viewpoint, k: int = N_SAMPLES) -> np.ndarray:
    """About ``k`` world points spread over the faces of ``obj`` that face ``viewpoint``.

    Candidate faces are the four sides and the top; points sit on a regular
    lattice inside each face, shared out in proportion to face area.
    """
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    px, py, pz = viewpoint
    lu = c * (px - obj.x) + s * (py - obj.y)
    lv = -s * (px - obj.x) + c * (py - obj.y)
    hl, hw, h = obj.length / 2, obj.width / 2, obj.height
    faces = []  # (area, builder)
    if lu > hl:
        faces.append((obj.width * h, lambda n: _side(hl, None, obj.width, h, n)))
    elif lu < -hl:
        faces.append((obj.width * h, lambda n: _side(-hl, None, obj.width, h, n)))
    if lv > hw:
        faces.append((obj.length * h, lambda n: _side(None, hw, obj.length, h, n)))
    elif lv < -hw:
        faces.append((obj.length * h, lambda n: _side(None, -hw, obj.length, h, n)))
    if pz > h:
        faces.append((obj.length * obj.width, lambda n: _top(obj.length, obj.width, h, n)))
    if not faces:
        return np.empty((0, 3))
    total = sum(a for a, _ in faces)
    local = np.concatenate([b(max(1, int(round(k * a / total)))) for a, b in faces])
    wx = obj.x + c * local[:, 0] - s * local[:, 1]
    wy = obj.y + s * local[:, 0] + c * local[:, 1]
    return np.column_stack([wx, wy, local[:, 2]])


def _side(u_fixed, v_fixed, span, h, n):
    a, z = _face_lattice(span, h, n)
    z = z + h / 2
    if u_fixed is not None:
        return np.column_stack([np.full_like(a, u_fixed), a, z])
    return np.column_stack([a, np.full_like(a, v_fixed), z])


def _top(ln, wd, h, n):
    u, v = _face_lattice(ln, wd, n)
    return np.column_stack([u, v, np.full_like(u, h)])


def visible_samples(objects: Sequence[ObjectState], sensor: SensorPose, target: ObjectState,
                    k: int = N_SAMPLES, fov_limited: bool = False) -> np.ndarray:
    """Sensor-facing surface samples of ``target`` with a free line of sight."""
    pts = facing_samples(target, sensor.position, k)
    if len(pts) == 0:
        return pts
    others = [o.box_row() for o in objects if o.id != target.id]
    free = np.ones(len(pts), bool)
    if others:
        free = ~kernels.segments_blocked(sensor.position, pts, np.array(others))
    if fov_limited:
        free &= in_fov(sensor, pts[:, 0], pts[:, 1], pts[:, 2])
    return pts[free]


def occlusion_oracle(objects: Sequence[ObjectState], sensor: SensorPose, target: ObjectState,
                     k: int = N_SAMPLES, fov_limited: bool = False) -> bool:
    """True iff every sampled sight line to the target's facing surface is blocked.

    With ``fov_limited`` samples outside the sensor's 3D FoV also count as
    blocked, so the result means "nothing of the target can be measured".
    """
    return len(visible_samples(objects, sensor, target, k, fov_limited)) == 0


# --------------------------------------------------------------------------
# trajectories


def _random_vehicles(cfg: SceneConfig, rng) -> list[tuple]:
    """(id, label, extent, direction, lane, speed, entry time) per vehicle."""
    lanes = [(d, k) for d in (1, -1) for k in range(cfg.lanes_per_direction)]
    lo, hi = cfg.speed_range
    # outer lanes are slower
    lane_speed = {}
    for d, k in lanes:
        frac = (k + rng.uniform(0.0, 1.0)) / cfg.lanes_per_direction
        lane_speed[(d, k)] = lo + (hi - lo) * frac
    per_lane = {ln: [] for ln in lanes}
    for n in range(cfg.n_vehicles):
        label = "truck" if rng.uniform() < cfg.truck_ratio else "car"
        d = 1 if rng.uniform() < 0.5 else -1
        if label == "truck" and rng.uniform() < cfg.truck_right_lane_prob:
            k = 0
        else:
            k = int(rng.integers(cfg.lanes_per_direction))
        ext = cfg.extents[label].draw(rng)
        per_lane[(d, k)].append((f"v{n:03d}", label, ext))
    road = cfg.road_x[1] - cfg.road_x[0]
    out = []
    for (d, k), vehicles in per_lane.items():
        if not vehicles:
            continue
        v = lane_speed[(d, k)]
        max_len = max(e[0] for _, _, e in vehicles)
        t_lo = -(road + max_len) / v
        span = cfg.duration - t_lo
        headway = (cfg.min_gap + max_len) / v
        m = len(vehicles)
        slack = span - headway * m
        if slack > 0:
            # uniform order statistics in the slack, then re-insert the headways
            u = np.sort(rng.uniform(0.0, slack, m))
            entries = t_lo + u + headway * np.arange(m)
        else:
            entries = t_lo + span * np.arange(m) / m
        for (vid, label, ext), t0 in zip(vehicles, entries):
            out.append((vid, label, ext, d, k, v, float(t0)))
    out.sort(key=lambda r: r[0])
    return out


def _trajectories(cfg: SceneConfig, rng) -> list[list[ObjectState]]:
    times = cfg.times
    frames = [[] for _ in times]
    x_lo, x_hi = cfg.road_x
    if cfg.vehicles is not None:
        for vs in cfg.vehicles:
            for f, t in enumerate(times):
                x = vs.x0 + vs.vx * t
                if cfg.despawn and not (x_lo - vs.length / 2 <= x <= x_hi + vs.length / 2):
                    continue
                yaw = 0.0 if vs.vx >= 0 else math.pi
                frames[f].append(ObjectState(vs.id, float(t), float(x), vs.y, yaw, vs.vx, 0.0, 0.0,
                                             vs.length, vs.width, vs.height, vs.label))
        return frames
    for vid, label, (ln, wd, ht), d, k, v, t0 in _random_vehicles(cfg, rng):
        y = cfg.lane_center(d, k)
        start = x_lo - ln / 2 if d > 0 else x_hi + ln / 2
        yaw = 0.0 if d > 0 else math.pi
        for f, t in enumerate(times):
            x = start + d * v * (t - t0)
            if x_lo - ln / 2 <= x <= x_hi + ln / 2:
                frames[f].append(ObjectState(vid, float(t), float(x), y, yaw, d * v, 0.0, 0.0,
                                             ln, wd, ht, label))
    return frames


# --------------------------------------------------------------------------
# sensors


def simulate_radar(log: GroundTruthLog, model: RadarDetectionModel, seed: Optional[int] = None) -> list:
    """Radar returns per frame, gated by the FoV-limited oracle."""
    rng = np.random.default_rng(seed)
    sensor = log.sensor
    det = model.deterministic
    frames = []
    for t, objs in zip(log.times, log.objects):
        t = float(t)
        frame = []
        for o in objs:
            pts = visible_samples(objs, sensor, o, fov_limited=True)
            if len(pts) == 0:
                continue
            if det:
                # reflection centre: the visible surface sample nearest their centroid
                chosen = pts[[int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))]]
            else:
                if rng.uniform() >= model.p_detect_visible:
                    continue
                n = 1 + int(rng.poisson(model.extra_returns_mean))
                chosen = pts[rng.integers(len(pts), size=n)]
                chosen = chosen + rng.normal(0.0, model.position_sigma, chosen.shape)
            for p in chosen:
                dop = o.radial_speed(sensor, *p)
                if not det:
                    dop += rng.normal(0.0, model.doppler_sigma)
                frame.append(Measurement(x=float(p[0]), y=float(p[1]), z=float(p[2]), doppler=float(dop),
                                         timestamp=t, source=o.id))
        if not det and model.clutter_rate > 0:
            for _ in range(int(rng.poisson(model.clutter_rate))):
                fov = sensor.fov
                rho = rng.uniform(0.0, fov.max_range)
                az = rng.uniform(-fov.azimuth_half_angle, fov.azimuth_half_angle) + sensor.yaw
                frame.append(Measurement(x=float(sensor.x + rho * math.cos(az)),
                                         y=float(sensor.y + rho * math.sin(az)), z=0.0,
                                         doppler=0.0, quality=0.1, timestamp=t, source=None))
        frames.append(frame)
    return frames


def box_corners(o: ObjectState) -> np.ndarray:
    c, s = math.cos(o.yaw), math.sin(o.yaw)
    hl, hw = o.length / 2, o.width / 2
    pts = []
    for z in (0.0, o.height):
        for a, b in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            pts.append((o.x + c * a - s * b, o.y + s * a + c * b, z))
    return np.array(pts)


def project_box(camera: PinholeCamera, o: ObjectState) -> Optional[BoundingBox2D]:
    """Image rectangle of the object's 3D box; ``None`` if not fully in front or off-image."""
    uv, depth = camera.project(box_corners(o))
    if np.any(depth <= 1e-6):
        return None
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    u0, u1 = max(u0, 0.0), min(u1, float(camera.image_width))
    v0, v1 = max(v0, 0.0), min(v1, float(camera.image_height))
    if u1 <= u0 or v1 <= v0:
        return None
    return BoundingBox2D(float(u0), float(v0), float(u1), float(v1), o.label, 1.0, o.id)


def simulate_camera(log: GroundTruthLog, camera: Optional[PinholeCamera] = None,
                    max_distance: float = 100.0) -> list:
    """2D boxes for unoccluded objects in front of the camera.

    An object is in range when the nearest point of its footprint is within
    ``max_distance`` (horizontal) of the camera.
    """
    sensor = log.sensor
    camera = camera or PinholeCamera(sensor)
    frames = []
    for objs in log.objects:
        frame = []
        for o in objs:
            if float(o.footprint().distance(sensor.x, sensor.y)) > max_distance:
                continue
            if occlusion_oracle(objs, sensor, o):
                continue
            box = project_box(camera, o)
            if box is not None:
                frame.append(box)
        frames.append(frame)
    return frames


def generate_scene(cfg: SceneConfig, sensors: bool = True) -> GroundTruthLog:
    """Trajectories, oracle flags and (optionally) radar and camera frames from ``cfg``."""
    root = np.random.SeedSequence(cfg.seed)
    traj_seed, radar_seed = root.spawn(2)
    rng = np.random.default_rng(traj_seed)
    objects = _trajectories(cfg, rng)
    sensor = cfg.sensor
    occluded = [{o.id: occlusion_oracle(objs, sensor, o, fov_limited=True) for o in objs} for objs in objects]
    log = GroundTruthLog(cfg.times, objects, occluded, [[] for _ in objects], [[] for _ in objects], sensor, cfg)
    if sensors:
        log.measurements = simulate_radar(log, cfg.radar, radar_seed)
        log.boxes = simulate_camera(log, PinholeCamera(sensor), cfg.camera_max_distance)
    return log
