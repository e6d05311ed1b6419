"""Measurements and the inverse sensor models that turn them into occupancy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .geometry import (
    UNKNOWN,
    FovSpec,
    GridSpec2D,
    ScalarGrid,
    SensorPose,
    SphericalGridSpec,
    VoxelGridSpec,
    from_sensor_polar,
    to_sensor_polar,
)


@dataclass
class Measurement:
    """One low-level sensor return.

    Exactly one of the Cartesian triple ``(x, y, z)`` (world metres) or the
    polar triple ``(r, azimuth, elevation)`` (relative to the sensor) is set.
    """

    kind: str = "radar"
    x: Optional[float] = None
    y: Optional[float] = None
    z: Optional[float] = None
    r: Optional[float] = None
    azimuth: Optional[float] = None
    elevation: Optional[float] = None
    doppler: float = 0.0
    quality: float = 1.0
    rcs: float = 0.0
    timestamp: float = 0.0
    source: Optional[str] = None

    def __post_init__(self):
        cart = self.x is not None
        pol = self.r is not None
        if cart == pol:
            raise ValueError("measurement needs exactly one of cartesian or polar position")
        if cart and (self.y is None or self.z is None):
            raise ValueError("cartesian position needs x, y and z")
        if pol:
            if self.azimuth is None or self.elevation is None:
                raise ValueError("polar position needs r, azimuth and elevation")
            if self.r < 0:
                raise ValueError("polar range must be non-negative")

    @property
    def is_cartesian(self) -> bool:
        return self.x is not None

    def xyz(self, sensor: Optional[SensorPose] = None) -> tuple[float, float, float]:
        if self.is_cartesian:
            return self.x, self.y, self.z
        if sensor is None:
            raise ValueError("sensor pose needed to convert a polar measurement")
        x, y, z = from_sensor_polar(sensor, self.r, self.azimuth, self.elevation)
        return float(x), float(y), float(z)

    def polar(self, sensor: Optional[SensorPose] = None) -> tuple[float, float, float]:
        if not self.is_cartesian:
            return self.r, self.azimuth, self.elevation
        if sensor is None:
            raise ValueError("sensor pose needed to convert a cartesian measurement")
        r, az, el = to_sensor_polar(sensor, self.x, self.y, self.z)
        return float(r), float(az), float(el)

    def to_cartesian(self, sensor: SensorPose) -> "Measurement":
        x, y, z = self.xyz(sensor)
        return _replace_position(self, x=x, y=y, z=z)

    def to_polar(self, sensor: SensorPose) -> "Measurement":
        r, az, el = self.polar(sensor)
        return _replace_position(self, r=r, azimuth=az, elevation=el)


def _replace_position(m: Measurement, **pos) -> Measurement:
    return Measurement(kind=m.kind, doppler=m.doppler, quality=m.quality, rcs=m.rcs,
                       timestamp=m.timestamp, source=m.source, **pos)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RadarFilterConfig:
    min_quality: float = 0.0
    elevation_bounds: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    rcs_bounds: tuple[float, float] = (-math.inf, math.inf)
    min_abs_doppler: float = 0.0

    def __post_init__(self):
        if self.elevation_bounds[0] > self.elevation_bounds[1] or self.rcs_bounds[0] > self.rcs_bounds[1]:
            raise ValueError("filter bounds must be ordered")


@dataclass(frozen=True)
class IsmConfig:
    """Scaled-Gaussian inverse sensor model.

    ``covariance`` is used by the Cartesian model, ``sigmas`` (range, azimuth,
    elevation) by the spherical one.
    """

    peak_occupancy: float = 0.9
    covariance: tuple[tuple[float, float], tuple[float, float]] = ((0.36, 0.0), (0.0, 0.36))
    sigmas: tuple[float, float, float] = (0.5, math.radians(0.5), math.radians(0.5))
    free_space_decrement: float = 0.1
    occupancy_prior: float = 0.5

    def __post_init__(self):
        cov = np.asarray(self.covariance, float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be symmetric positive definite")
        if min(self.sigmas) <= 0:
            raise ValueError("sigmas must be positive")
        if not 0 < self.peak_occupancy <= 1 or self.peak_occupancy <= self.occupancy_prior:
            raise ValueError("peak_occupancy must lie in (prior, 1]")
        if not 0 <= self.free_space_decrement < 1:
            raise ValueError("free_space_decrement must lie in [0, 1)")


@dataclass(frozen=True)
class DecayConfig:
    decay_rate: float = 0.5

    def __post_init__(self):
        if not 0 <= self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in [0, 1]")


# --------------------------------------------------------------------------
# radar


def preprocess_radar(measurements: Sequence[Measurement], cfg: RadarFilterConfig,
                     sensor: Optional[SensorPose] = None) -> list[Measurement]:
    """Keep the returns passing the quality, elevation, RCS and Doppler gates."""
    out = []
    lo_el, hi_el = cfg.elevation_bounds
    lo_rcs, hi_rcs = cfg.rcs_bounds
    for m in measurements:
        if m.quality < cfg.min_quality:
            continue
        if not lo_rcs <= m.rcs <= hi_rcs:
            continue
        if abs(m.doppler) < cfg.min_abs_doppler:
            continue
        if m.is_cartesian and sensor is None:
            el = None
        else:
            el = m.polar(sensor)[2]
        if el is not None and not lo_el <= el <= hi_el:
            continue
        out.append(m)
    return out


def ism_increments_cartesian(spec: GridSpec2D, z: Measurement, cfg: IsmConfig,
                             sensor: SensorPose) -> np.ndarray:
    """Dense additive evidence of one measurement (before clamping)."""
    if not z.is_cartesian:
        raise ValueError("Cartesian ISM needs a Cartesian measurement")
    delta = np.zeros(spec.shape)
    cov = np.asarray(cfg.covariance, float)
    inv = np.linalg.inv(cov)
    sx, sy = 3.0 * math.sqrt(cov[0, 0]), 3.0 * math.sqrt(cov[1, 1])
    res = spec.resolution
    i0 = max(int(math.floor((z.x - sx - spec.origin_x) / res)), 0)
    i1 = min(int(math.floor((z.x + sx - spec.origin_x) / res)), spec.width - 1)
    j0 = max(int(math.floor((z.y - sy - spec.origin_y) / res)), 0)
    j1 = min(int(math.floor((z.y + sy - spec.origin_y) / res)), spec.height - 1)
    near = np.zeros(spec.shape, bool)
    if i0 <= i1 and j0 <= j1:
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        cx, cy = spec.cell_center(ii, jj)
        d = np.stack([cx - z.x, cy - z.y], axis=-1)
        m2 = np.einsum("...i,ij,...j->...", d, inv, d)
        inside = m2 <= 9.0
        near[ii[inside], jj[inside]] = True
        delta[ii[inside], jj[inside]] = (cfg.peak_occupancy - cfg.occupancy_prior) * np.exp(-0.5 * m2[inside])
    if cfg.free_space_decrement > 0:
        start = spec.to_index_space(sensor.x, sensor.y)
        end = spec.to_index_space(z.x, z.y)
        cells = kernels.traverse_cells(spec.shape, start, end)
        if len(cells):
            free = ~near[cells[:, 0], cells[:, 1]]
            delta[cells[free, 0], cells[free, 1]] -= cfg.free_space_decrement
    return delta


def ism_update_cartesian(grid: ScalarGrid, z: Measurement, cfg: IsmConfig, sensor: SensorPose) -> ScalarGrid:
    delta = ism_increments_cartesian(grid.spec, z, cfg, sensor)
    return ScalarGrid(grid.spec, np.clip(grid.values + delta, 0.0, 1.0), grid.mask)


def ism_increments_spherical(spec: SphericalGridSpec, z: Measurement, cfg: IsmConfig) -> tuple:
    """Sparse evidence of one polar measurement: ``(index tuple, increments)``.

    Occupied evidence is the scaled Gaussian over the per-axis sigmas; free
    evidence is a constant decrement on bins of the same ray family closer than
    ``r - 3 sigma_r``.
    """
    if z.is_cartesian:
        raise ValueError("spherical ISM needs a polar measurement")
    if spec.bin_of(z.r, z.azimuth, z.elevation) is None:
        raise ValueError(f"measurement at r={z.r:.2f} az={z.azimuth:.4f} el={z.elevation:.4f} outside the grid")
    s_r, s_az, s_el = cfg.sigmas
    rc, ac, ec = spec.range_centers(), spec.azimuth_centers(), spec.elevation_centers()
    ia = np.nonzero(np.abs(ac - z.azimuth) <= 3 * s_az)[0]
    je = np.nonzero(np.abs(ec - z.elevation) <= 3 * s_el)[0]
    if ia.size == 0:
        ia = np.array([spec.bin_of(z.r, z.azimuth, z.elevation)[1]])
    if je.size == 0:
        je = np.array([spec.bin_of(z.r, z.azimuth, z.elevation)[2]])
    ang2 = ((ac[ia, None] - z.azimuth) / s_az) ** 2 + ((ec[None, je] - z.elevation) / s_el) ** 2
    ka = np.nonzero(np.abs(rc - z.r) <= 3 * s_r)[0]
    idx_k, idx_i, idx_j, inc = [], [], [], []
    if ka.size:
        m2 = ((rc[ka, None, None] - z.r) / s_r) ** 2 + ang2[None]
        sel = m2 <= 9.0
        k, a, e = np.nonzero(sel)
        idx_k.append(ka[k]), idx_i.append(ia[a]), idx_j.append(je[e])
        inc.append((cfg.peak_occupancy - cfg.occupancy_prior) * np.exp(-0.5 * m2[sel]))
    if cfg.free_space_decrement > 0:
        kf = np.nonzero(rc < z.r - 3 * s_r)[0]
        a, e = np.nonzero(ang2 <= 9.0)
        if kf.size and a.size:
            idx_k.append(np.repeat(kf, a.size))
            idx_i.append(np.tile(ia[a], kf.size))
            idx_j.append(np.tile(je[e], kf.size))
            inc.append(np.full(kf.size * a.size, -cfg.free_space_decrement))
    if not inc:
        empty = np.zeros(0, np.int64)
        return (empty, empty, empty), np.zeros(0)
    return (np.concatenate(idx_k), np.concatenate(idx_i), np.concatenate(idx_j)), np.concatenate(inc)


def ism_update_spherical(grid: ScalarGrid, z: Measurement, cfg: IsmConfig, inplace: bool = False) -> ScalarGrid:
    """One measurement's evidence, clamped to [0, 1].

    With ``inplace`` the grid's own array is modified and the grid returned.
    """
    idx, inc = ism_increments_spherical(grid.spec, z, cfg)
    if not inplace:
        grid = ScalarGrid(grid.spec, grid.values.copy(), grid.mask)
    grid.values[idx] = np.clip(grid.values[idx] + inc, 0.0, 1.0)
    return grid


def ism_update_batch(grid: ScalarGrid, frame: Sequence[Measurement], cfg: IsmConfig,
                     sensor: Optional[SensorPose] = None) -> ScalarGrid:
    """Sum-then-clamp update for all measurements of one frame.

    Equals sequential updates whenever no intermediate value leaves [0, 1].
    """
    total = np.zeros(grid.spec.shape)
    for z in frame:
        if isinstance(grid.spec, SphericalGridSpec):
            idx, inc = ism_increments_spherical(grid.spec, z, cfg)
            np.add.at(total, idx, inc)
        else:
            total += ism_increments_cartesian(grid.spec, z, cfg, sensor)
    return ScalarGrid(grid.spec, np.clip(grid.values + total, 0.0, 1.0), grid.mask)


def apply_decay(grid: ScalarGrid, dt: float, cfg: DecayConfig) -> ScalarGrid:
    """Relax every value toward the unknown prior: v' = 0.5 + (v - 0.5) * rate**dt."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    f = cfg.decay_rate ** dt
    return ScalarGrid(grid.spec, UNKNOWN + (grid.values - UNKNOWN) * f, grid.mask)


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class BoundingBox2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    label: str = "car"
    confidence: float = 1.0
    source: Optional[str] = None

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise ValueError("bounding box max must exceed min on both axes")


@dataclass(frozen=True)
class BoundingBox3D:
    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float
    label: str = "car"
    source: Optional[str] = None

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("box extents must be positive")

    def as_row(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.length, self.width, self.height, 0.0])


class Homography:
    """Image (u, v) to ground-plane (x, y) projective map."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise ValueError("homography must be invertible")

    def apply(self, u, v, eps: float = 1e-9):
        p = self.matrix @ np.array([u, v, 1.0])
        if abs(p[2]) < eps:
            raise ValueError("point projects to infinity")
        return p[0] / p[2], p[1] / p[2]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class PinholeCamera:
    """Ideal pinhole camera at a sensor pose (optical axis along yaw/pitch)."""

    pose: SensorPose
    fx: float = 1200.0
    fy: float = 1200.0
    cx: float = 960.0
    cy: float = 540.0
    image_width: int = 1920
    image_height: int = 1080

    def rotation(self) -> np.ndarray:
        cp, sp = math.cos(self.pose.pitch), math.sin(self.pose.pitch)
        cyw, syw = math.cos(self.pose.yaw), math.sin(self.pose.yaw)
        fwd = np.array([cp * cyw, cp * syw, sp])
        right = np.array([syw, -cyw, 0.0])
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) to pixel coordinates (N, 2) and camera depth (N,)."""
        pc = (np.asarray(points, float) - self.pose.position) @ self.rotation().T
        depth = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / depth + self.cx, self.fy * pc[:, 1] / depth + self.cy], axis=1)
        return uv, depth

    def fov(self, max_range: float) -> FovSpec:
        """Static FoV of the image frustum, elevation relative to the pose pitch."""
        az = math.atan(max(self.cx, self.image_width - self.cx) / self.fx)
        return FovSpec(max_range, min(az, math.pi), -math.atan((self.image_height - self.cy) / self.fy),
                       math.atan(self.cy / self.fy))

    def ground_homography(self) -> Homography:
        rot = self.rotation()
        m = np.column_stack([rot[:, 0], rot[:, 1], -rot @ self.pose.position])
        return Homography(self.intrinsics @ m).inverse()


def estimate_box3d(box: BoundingBox2D, h: Homography,
                   size_prior: Mapping[str, tuple[float, float, float]]) -> BoundingBox3D:
    """Lift a 2D detection to a ground-plane 3D box of class-typical size.

    The bottom-centre pixel is taken as the near ground contact point; yaw is
    normal to the projected bottom edge, pointing away from the camera; the box
    centre lies half a length behind the contact point.
    """
    if box.label not in size_prior:
        raise KeyError(f"no size prior for class {box.label!r}")
    length, width, height = size_prior[box.label]
    uc = 0.5 * (box.u_min + box.u_max)
    gx, gy = h.apply(uc, box.v_max)
    ax, ay = h.apply(box.u_min, box.v_max)
    bx, by = h.apply(box.u_max, box.v_max)
    fx, fy = h.apply(uc, box.v_max - 1.0)
    yaw = math.atan2(by - ay, bx - ax) + math.pi / 2
    if math.cos(yaw) * (fx - gx) + math.sin(yaw) * (fy - gy) < 0:
        yaw += math.pi
    yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    cx = gx + 0.5 * length * math.cos(yaw)
    cy = gy + 0.5 * length * math.sin(yaw)
    return BoundingBox3D(cx, cy, yaw, length, width, height, box.label, box.source)


def points_in_box(box_row, x, y, z) -> np.ndarray:
    cx, cy, yaw, ln, wd, ht, zb = box_row
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = x - cx, y - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= ln / 2) & (np.abs(v) <= wd / 2) & (z >= zb) & (z <= zb + ht)


def voxelize_boxes(grid: ScalarGrid, boxes: Sequence[BoundingBox3D], occupied_value: float = 0.9) -> ScalarGrid:
    """Raise voxels whose centre lies inside any box toward ``occupied_value``."""
    if not 0.5 < occupied_value <= 1:
        raise ValueError("occupied_value must lie in (0.5, 1]")
    spec: VoxelGridSpec = grid.spec
    base = spec.base
    hit = np.zeros(spec.shape, bool)
    zc = spec.z_centers()
    for b in boxes:
        row = b.as_row()
        reach = 0.5 * math.hypot(b.length, b.width)
        i0 = max(int(math.floor((b.x - reach - base.origin_x) / base.resolution)), 0)
        i1 = min(int(math.floor((b.x + reach - base.origin_x) / base.resolution)), base.width - 1)
        j0 = max(int(math.floor((b.y - reach - base.origin_y) / base.resolution)), 0)
        j1 = min(int(math.floor((b.y + reach - base.origin_y) / base.resolution)), base.height - 1)
        if i0 > i1 or j0 > j1:
            continue
        ii, jj, kk = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), np.arange(spec.n_z), indexing="ij")
        x, y = base.cell_center(ii, jj)
        inside = points_in_box(row, x, y, zc[kk])
        hit[ii[inside], jj[inside], kk[inside]] = True
    values = grid.values.copy()
    values[hit] = np.clip(values[hit] + (occupied_value - UNKNOWN), 0.0, 1.0)
    return ScalarGrid(spec, values, grid.mask)
