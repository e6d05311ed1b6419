"""Grid domains, sensor poses and the transforms between them.

Conventions: world x runs along the road, y across it, z up. A 2D grid cell
``(i, j)`` covers ``[ox + i*res, ox + (i+1)*res) x [oy + j*res, oy + (j+1)*res)``
and values are stored as ``values[i, j]``. Spherical grids store
``values[range, azimuth, elevation]``; azimuth is measured from the sensor
yaw, elevation from the horizontal plane. Range is slant range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

UNKNOWN = 0.5


@dataclass(frozen=True)
class FovSpec:
    max_range: float
    azimuth_half_angle: float
    elevation_min: float = -math.pi / 2
    elevation_max: float = math.pi / 2

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.azimuth_half_angle <= math.pi:
            raise ValueError("azimuth_half_angle must lie in (0, pi]")
        if not self.elevation_min < self.elevation_max:
            raise ValueError("elevation_min must be below elevation_max")


@dataclass(frozen=True)
class SensorPose:
    x: float
    y: float
    z: float
    yaw: float = 0.0
    pitch: float = 0.0
    fov: FovSpec = field(default_factory=lambda: FovSpec(150.0, math.radians(20.0)))

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("sensor height must be non-negative")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def elevation_bounds(self) -> tuple[float, float]:
        return self.pitch + self.fov.elevation_min, self.pitch + self.fov.elevation_max


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def to_sensor_polar(sensor: SensorPose, x, y, z):
    """World points to (slant range, azimuth, elevation) relative to ``sensor``."""
    dx = np.asarray(x, float) - sensor.x
    dy = np.asarray(y, float) - sensor.y
    dz = np.asarray(z, float) - sensor.z
    rho = np.hypot(dx, dy)
    return np.hypot(rho, dz), wrap_angle(np.arctan2(dy, dx) - sensor.yaw), np.arctan2(dz, rho)


def from_sensor_polar(sensor: SensorPose, r, az, el):
    r, az, el = (np.asarray(v, float) for v in (r, az, el))
    ce = np.cos(el)
    a = az + sensor.yaw
    return sensor.x + r * ce * np.cos(a), sensor.y + r * ce * np.sin(a), sensor.z + r * np.sin(el)


def in_fov(sensor: SensorPose, x, y, z=None):
    """Static FoV test.

    With ``z=None`` only the ground-plane wedge is checked (horizontal range
    and azimuth); otherwise slant range, azimuth and elevation.
    """
    dx = np.asarray(x, float) - sensor.x
    dy = np.asarray(y, float) - sensor.y
    rho = np.hypot(dx, dy)
    az = wrap_angle(np.arctan2(dy, dx) - sensor.yaw)
    ok = np.abs(az) <= sensor.fov.azimuth_half_angle
    if z is None:
        return ok & (rho <= sensor.fov.max_range)
    dz = np.asarray(z, float) - sensor.z
    el = np.arctan2(dz, rho)
    lo, hi = sensor.elevation_bounds
    return ok & (np.hypot(rho, dz) <= sensor.fov.max_range) & (el >= lo) & (el <= hi)


# --------------------------------------------------------------------------
# grid specs


@dataclass(frozen=True)
class GridSpec2D:
    origin_x: float
    origin_y: float
    width: int
    height: int
    resolution: float

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell_center(self, i, j):
        return (self.origin_x + (np.asarray(i) + 0.5) * self.resolution,
                self.origin_y + (np.asarray(j) + 0.5) * self.resolution)

    def centers(self):
        """(width, height) arrays of cell-centre x and y."""
        i, j = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="ij")
        return self.cell_center(i, j)

    def to_index_space(self, x, y):
        return ((np.asarray(x, float) - self.origin_x) / self.resolution,
                (np.asarray(y, float) - self.origin_y) / self.resolution)


@dataclass(frozen=True)
class SphericalGridSpec:
    r_min: float
    r_max: float
    n_range: int
    azimuth_min: float
    azimuth_max: float
    n_azimuth: int
    elevation_min: float
    elevation_max: float
    n_elevation: int

    def __post_init__(self):
        if not (0 <= self.r_min < self.r_max):
            raise ValueError("need 0 <= r_min < r_max")
        if not self.azimuth_min < self.azimuth_max:
            raise ValueError("need azimuth_min < azimuth_max")
        if not self.elevation_min < self.elevation_max:
            raise ValueError("need elevation_min < elevation_max")
        if self.n_range <= 0 or self.n_azimuth <= 0 or self.n_elevation < 0:
            raise ValueError("bin counts must be positive")

    @property
    def shape(self):
        return (self.n_range, self.n_azimuth, self.n_elevation)

    @property
    def dr(self):
        return (self.r_max - self.r_min) / self.n_range

    @property
    def daz(self):
        return (self.azimuth_max - self.azimuth_min) / self.n_azimuth

    @property
    def del_(self):
        return (self.elevation_max - self.elevation_min) / self.n_elevation

    def range_centers(self):
        return self.r_min + (np.arange(self.n_range) + 0.5) * self.dr

    def azimuth_centers(self):
        return self.azimuth_min + (np.arange(self.n_azimuth) + 0.5) * self.daz

    def elevation_centers(self):
        return self.elevation_min + (np.arange(self.n_elevation) + 0.5) * self.del_

    def bin_of(self, r, az, el):
        """Bin indices (k, i, j) or None when outside the bounds."""
        k = _bin(r, self.r_min, self.r_max, self.n_range)
        i = _bin(az, self.azimuth_min, self.azimuth_max, self.n_azimuth)
        j = _bin(el, self.elevation_min, self.elevation_max, self.n_elevation)
        if k is None or i is None or j is None:
            return None
        return k, i, j

    def bin_center(self, k, i, j):
        return (self.r_min + (k + 0.5) * self.dr,
                self.azimuth_min + (i + 0.5) * self.daz,
                self.elevation_min + (j + 0.5) * self.del_)

    def polar(self, height: Optional[float] = None) -> "PolarGridSpec":
        return PolarGridSpec(self.r_min, self.r_max, self.n_range,
                             self.azimuth_min, self.azimuth_max, self.n_azimuth, height)


@dataclass(frozen=True)
class PolarGridSpec:
    """Range x azimuth grid; ``height`` is set when it is a slice of a sphere."""

    r_min: float
    r_max: float
    n_range: int
    azimuth_min: float
    azimuth_max: float
    n_azimuth: int
    height: Optional[float] = None

    @property
    def shape(self):
        return (self.n_range, self.n_azimuth)

    @property
    def dr(self):
        return (self.r_max - self.r_min) / self.n_range

    @property
    def daz(self):
        return (self.azimuth_max - self.azimuth_min) / self.n_azimuth


@dataclass(frozen=True)
class VoxelGridSpec:
    base: GridSpec2D
    z_min: float
    z_max: float
    n_z: int

    def __post_init__(self):
        if not self.z_min < self.z_max:
            raise ValueError("need z_min < z_max")
        if self.n_z <= 0:
            raise ValueError("n_z must be positive")

    @property
    def shape(self):
        return (self.base.width, self.base.height, self.n_z)

    @property
    def dz(self):
        return (self.z_max - self.z_min) / self.n_z

    def z_centers(self):
        return self.z_min + (np.arange(self.n_z) + 0.5) * self.dz


Spec = Union[GridSpec2D, SphericalGridSpec, PolarGridSpec, VoxelGridSpec]


def _bin(v, lo, hi, n):
    if not (lo <= v < hi):
        return None
    return min(int(math.floor((v - lo) / (hi - lo) * n)), n - 1)


@dataclass
class ScalarGrid:
    """Dense values over a grid spec, with an optional validity mask."""

    spec: Spec
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(self.spec.shape):
            raise ValueError(f"values shape {self.values.shape} does not match spec {self.spec.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError("mask shape must match values")

    @classmethod
    def full(cls, spec: Spec, value: float = UNKNOWN):
        return cls(spec, np.full(spec.shape, float(value)))

    def copy(self):
        return ScalarGrid(self.spec, self.values.copy(), None if self.mask is None else self.mask.copy())


# --------------------------------------------------------------------------
# operations


def world_to_cell(spec: GridSpec2D, point) -> Optional[tuple[int, int]]:
    gx, gy = spec.to_index_space(point[0], point[1])
    i, j = math.floor(gx), math.floor(gy)
    if 0 <= i < spec.width and 0 <= j < spec.height:
        return i, j
    return None


def cell_center(spec: GridSpec2D, cell) -> tuple[float, float]:
    x, y = spec.cell_center(cell[0], cell[1])
    return float(x), float(y)


@dataclass(frozen=True)
class OrientedRect:
    cx: float
    cy: float
    yaw: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.cx, self.cy]

    def distance(self, x, y):
        """Euclidean distance from points to the rectangle (0 inside)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x, float) - self.cx
        dy = np.asarray(y, float) - self.cy
        u = np.abs(c * dx + s * dy) - self.length / 2
        v = np.abs(-s * dx + c * dy) - self.width / 2
        return np.hypot(np.maximum(u, 0.0), np.maximum(v, 0.0))


def cells_overlapping(spec: GridSpec2D, footprint: OrientedRect, eps: float = 1e-9) -> list[tuple[int, int]]:
    """Cells whose square intersects the oriented rectangle with positive area.

    Separating-axis test on the four edge normals; a mere touch (zero-width
    overlap on some axis) does not count.
    """
    if footprint.length <= 0 or footprint.width <= 0:
        raise ValueError("footprint needs positive length and width")
    corners = footprint.corners()
    gx, gy = spec.to_index_space(corners[:, 0], corners[:, 1])
    i0 = max(int(math.floor(gx.min())) - 1, 0)
    i1 = min(int(math.floor(gx.max())) + 1, spec.width - 1)
    j0 = max(int(math.floor(gy.min())) - 1, 0)
    j1 = min(int(math.floor(gy.max())) + 1, spec.height - 1)
    if i0 > i1 or j0 > j1:
        return []
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    res = spec.resolution
    x0 = spec.origin_x + ii * res
    y0 = spec.origin_y + jj * res
    cell_pts = np.stack([np.stack([x0, y0], -1), np.stack([x0 + res, y0], -1),
                         np.stack([x0 + res, y0 + res], -1), np.stack([x0, y0 + res], -1)], axis=1)
    c, s = math.cos(footprint.yaw), math.sin(footprint.yaw)
    axes = np.array([[1.0, 0.0], [0.0, 1.0], [c, s], [-s, c]])
    keep = np.ones(ii.shape, bool)
    for ax in axes:
        pc = cell_pts @ ax
        pf = corners @ ax
        lo = np.maximum(pc.min(axis=1), pf.min())
        hi = np.minimum(pc.max(axis=1), pf.max())
        keep &= (hi - lo) > eps * res
    return [(int(a), int(b)) for a, b in zip(ii[keep], jj[keep])]


def fov_mask_2d(spec: GridSpec2D, sensor: SensorPose, whole_cell: bool = True) -> np.ndarray:
    """Cells inside the ground-plane FoV wedge.

    By default a cell counts only if all four corners are inside, so a cell
    never claims visibility for a part of itself the sensor cannot cover.
    ``whole_cell=False`` tests the centre instead.
    """
    x, y = spec.centers()
    if not whole_cell:
        return in_fov(sensor, x, y)
    h = spec.resolution / 2
    ok = np.ones(spec.shape, bool)
    for sx in (-h, h):
        for sy in (-h, h):
            ok &= in_fov(sensor, x + sx, y + sy)
    return ok


def slice_at_height(grid: ScalarGrid, sensor: SensorPose, h: float) -> ScalarGrid:
    """Range x azimuth slice of a spherical grid through height ``h`` above ground.

    For each range bin the elevation whose ray reaches height ``h`` at that
    slant range is ``asin((h - z_sensor) / r)``; bins where that elevation is
    undefined or outside the grid carry :data:`UNKNOWN` and mask ``False``.
    """
    spec = grid.spec
    if not isinstance(spec, SphericalGridSpec):
        raise TypeError("slice_at_height needs a spherical grid")
    if spec.n_elevation == 0:
        raise ValueError("spherical grid has no elevation bins")
    r = spec.range_centers()
    s = (h - sensor.z) / r
    valid = np.abs(s) <= 1.0
    el = np.arcsin(np.clip(s, -1.0, 1.0))
    j = np.floor((el - spec.elevation_min) / spec.del_).astype(np.int64)
    valid &= (el >= spec.elevation_min) & (el < spec.elevation_max)
    j = np.clip(j, 0, spec.n_elevation - 1)
    k = np.arange(spec.n_range)
    vals = grid.values[k, :, j[:]]  # (n_range, n_azimuth)
    mask = np.broadcast_to(valid[:, None], vals.shape).copy()
    if grid.mask is not None:
        mask &= grid.mask[k, :, j]
    vals = np.where(mask, vals, UNKNOWN)
    return ScalarGrid(spec.polar(height=h), vals, mask)


def slice_elevation_index(spec: SphericalGridSpec, sensor: SensorPose, h: float) -> np.ndarray:
    """Per range bin, the elevation index used by :func:`slice_at_height` (-1 if none)."""
    r = spec.range_centers()
    s = (h - sensor.z) / r
    el = np.arcsin(np.clip(s, -1.0, 1.0))
    j = np.floor((el - spec.elevation_min) / spec.del_).astype(np.int64)
    ok = (np.abs(s) <= 1.0) & (el >= spec.elevation_min) & (el < spec.elevation_max)
    return np.where(ok, np.clip(j, 0, spec.n_elevation - 1), -1)


def resample_polar_to_cartesian(polar: ScalarGrid, sensor: SensorPose, target: GridSpec2D) -> ScalarGrid:
    """Nearest-bin resampling of a range x azimuth grid onto Cartesian cells.

    If the polar grid is a height slice, the range of a cell is the slant
    range to its centre lifted to that height. Cells outside the polar span get
    :data:`UNKNOWN` and mask ``False``.
    """
    spec = polar.spec
    x, y = target.centers()
    dx, dy = x - sensor.x, y - sensor.y
    rho = np.hypot(dx, dy)
    r = rho if spec.height is None else np.hypot(rho, spec.height - sensor.z)
    az = wrap_angle(np.arctan2(dy, dx) - sensor.yaw)
    k = np.floor((r - spec.r_min) / spec.dr).astype(np.int64)
    i = np.floor((az - spec.azimuth_min) / spec.daz).astype(np.int64)
    ok = (r >= spec.r_min) & (r < spec.r_max) & (az >= spec.azimuth_min) & (az < spec.azimuth_max)
    k = np.clip(k, 0, spec.n_range - 1)
    i = np.clip(i, 0, spec.n_azimuth - 1)
    vals = polar.values[k, i]
    if polar.mask is not None:
        ok &= polar.mask[k, i]
    return ScalarGrid(target, np.where(ok, vals, UNKNOWN), ok)
