"""Line-of-sight visibility from occupancy grids and the four estimator stacks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .geometry import (
    UNKNOWN,
    FovSpec,
    GridSpec2D,
    OrientedRect,
    ScalarGrid,
    SensorPose,
    SphericalGridSpec,
    VoxelGridSpec,
    cells_overlapping,
    fov_mask_2d,
    in_fov,
    resample_polar_to_cartesian,
    slice_at_height,
    to_sensor_polar,
    wrap_angle,
)
from .sensors import (
    BoundingBox2D,
    DecayConfig,
    IsmConfig,
    Measurement,
    PinholeCamera,
    RadarFilterConfig,
    apply_decay,
    estimate_box3d,
    ism_update_cartesian,
    ism_update_spherical,
    preprocess_radar,
    voxelize_boxes,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("radar2d", "radar3d", "camera3d", "reference")


@dataclass(frozen=True)
class OccupancyThreshold:
    occupied_above: float = 0.6

    def __post_init__(self):
        if not 0.5 < self.occupied_above <= 1:
            raise ValueError("occupied_above must lie in (0.5, 1]")


@dataclass
class VisibilityGrid2D:
    spec: GridSpec2D
    values: np.ndarray
    fov_mask: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        self.fov_mask = np.asarray(self.fov_mask, bool)
        if self.values.shape != self.spec.shape or self.fov_mask.shape != self.spec.shape:
            raise ValueError("visibility arrays must match the grid shape")


def _thr(thr) -> float:
    return thr.occupied_above if isinstance(thr, OccupancyThreshold) else OccupancyThreshold(thr).occupied_above


# --------------------------------------------------------------------------
# raytracers


def raytrace_2d(occ: ScalarGrid, sensor: SensorPose, fov: Optional[FovSpec] = None,
                thr=OccupancyThreshold()) -> VisibilityGrid2D:
    """Visibility of every in-FoV cell centre seen from the sensor's ground position."""
    spec: GridSpec2D = occ.spec
    if fov is not None and fov != sensor.fov:
        sensor = SensorPose(sensor.x, sensor.y, sensor.z, sensor.yaw, sensor.pitch, fov)
    mask = fov_mask_2d(spec, sensor)
    blocked = occ.values >= _thr(thr)
    targets = np.argwhere(mask)
    start = np.array(spec.to_index_space(sensor.x, sensor.y))
    values = np.zeros(spec.shape)
    values[mask] = kernels.dda_visibility(blocked, start, targets)
    return VisibilityGrid2D(spec, values, mask)


def raytrace_spherical(occ: ScalarGrid, thr=OccupancyThreshold(), graded: bool = False) -> ScalarGrid:
    """Per-ray scan outward in range; rays are independent of each other."""
    return ScalarGrid(occ.spec, kernels.scan_rays(occ.values, _thr(thr), graded), occ.mask)


def raytrace_voxels(occ: ScalarGrid, sensor: SensorPose, thr=OccupancyThreshold(),
                    fov_limited: bool = False) -> ScalarGrid:
    """Line of sight from the 3D sensor position to every voxel centre.

    With ``fov_limited`` voxels whose centre lies outside the sensor's 3D FoV
    are invisible regardless of occupancy.
    """
    spec: VoxelGridSpec = occ.spec
    base = spec.base
    gx, gy = base.to_index_space(sensor.x, sensor.y)
    start = np.array([gx, gy, (sensor.z - spec.z_min) / spec.dz])
    targets = np.indices(spec.shape).reshape(3, -1).T
    vis = kernels.dda_visibility(occ.values >= _thr(thr), start, targets).reshape(spec.shape)
    if fov_limited:
        x, y = base.centers()
        inside = in_fov(sensor, x[:, :, None], y[:, :, None], spec.z_centers()[None, None, :])
        vis = np.where(inside, vis, 0.0)
    return ScalarGrid(spec, vis)


def squash_z_average(vis3d: ScalarGrid, z_lo: float = 0.0, z_hi: float = 4.0,
                     fov_mask: Optional[np.ndarray] = None) -> VisibilityGrid2D:
    """Mean visibility over the voxel layers whose centre height lies in [z_lo, z_hi]."""
    spec: VoxelGridSpec = vis3d.spec
    zc = spec.z_centers()
    layers = (zc >= z_lo) & (zc <= z_hi)
    if not layers.any():
        raise ValueError(f"no voxel layer centred inside [{z_lo}, {z_hi}] m")
    values = vis3d.values[:, :, layers].mean(axis=2)
    mask = np.ones(spec.base.shape, bool) if fov_mask is None else fov_mask
    return VisibilityGrid2D(spec.base, values, mask)


def object_visibility(vis: VisibilityGrid2D, obj, vis_threshold: float = 0.5) -> bool:
    """True iff some in-FoV cell overlapping the object's footprint is visible."""
    if not 0 < vis_threshold <= 1:
        raise ValueError("vis_threshold must lie in (0, 1]")
    cells = cells_overlapping(vis.spec, obj.footprint())
    if not cells:
        raise ValueError(f"object {getattr(obj, 'id', '?')} lies outside the grid")
    ij = np.array(cells)
    i, j = ij[:, 0], ij[:, 1]
    return bool(np.any((vis.values[i, j] >= vis_threshold) & vis.fov_mask[i, j]))


# --------------------------------------------------------------------------
# reference occupancy


def box_angular_ranges(spec: SphericalGridSpec, sensor: SensorPose, boxes: np.ndarray) -> np.ndarray:
    """Conservative (azimuth, elevation) index ranges subtended by each box."""
    out = np.zeros((len(boxes), 4), np.int64)
    for n, (cx, cy, yaw, ln, wd, ht, zb) in enumerate(boxes):
        rect = OrientedRect(cx, cy, yaw, ln, wd)
        corners = rect.corners()
        rho_min = float(rect.distance(sensor.x, sensor.y))
        rho_max = float(np.hypot(corners[:, 0] - sensor.x, corners[:, 1] - sensor.y).max())
        if rho_min == 0.0:
            i0, i1 = 0, spec.n_azimuth
        else:
            az = wrap_angle(np.arctan2(corners[:, 1] - sensor.y, corners[:, 0] - sensor.x) - sensor.yaw)
            if az.max() - az.min() > math.pi:
                i0, i1 = 0, spec.n_azimuth
            else:
                i0 = int(math.floor((az.min() - spec.azimuth_min) / spec.daz))
                i1 = int(math.floor((az.max() - spec.azimuth_min) / spec.daz)) + 1
        el = [math.atan2(z - sensor.z, rho) for z in (zb, zb + ht) for rho in (rho_min, rho_max)]
        j0 = int(math.floor((min(el) - spec.elevation_min) / spec.del_))
        j1 = int(math.floor((max(el) - spec.elevation_min) / spec.del_)) + 1
        out[n] = (max(i0, 0), min(i1, spec.n_azimuth), max(j0, 0), min(j1, spec.n_elevation))
    return out


def rasterize_boxes_spherical(spec: SphericalGridSpec, sensor: SensorPose, boxes: np.ndarray,
                              margin: float = 0.0) -> ScalarGrid:
    """Perfect occupancy: the fraction of each bin's centre ray lying inside a box.

    ``boxes`` rows are (cx, cy, yaw, length, width, height, z_base); every box
    is grown by ``margin`` on each side before rasterising.
    """
    boxes = np.asarray(boxes, float).reshape(-1, 7).copy()
    if margin:
        boxes[:, 3:5] += 2 * margin
        boxes[:, 5] += 2 * margin
        boxes[:, 6] -= margin
    occ = np.zeros(spec.shape)
    if len(boxes):
        ranges = box_angular_ranges(spec, sensor, boxes)
        grid = (spec.r_min, spec.dr, spec.azimuth_min, spec.daz, spec.elevation_min, spec.del_)
        occ = kernels.rasterize_spherical(occ, (sensor.x, sensor.y, sensor.z, sensor.yaw), grid, boxes, ranges)
    return ScalarGrid(spec, occ)


def rasterize_footprints_2d(spec: GridSpec2D, objects) -> ScalarGrid:
    values = np.zeros(spec.shape)
    for obj in objects:
        for i, j in cells_overlapping(spec, obj.footprint()):
            values[i, j] = 1.0
    return ScalarGrid(spec, values)


# --------------------------------------------------------------------------
# pipelines


def default_spherical_spec(sensor: SensorPose, dr: float = 0.5, daz_deg: float = 0.25,
                           del_deg: float = 0.25) -> SphericalGridSpec:
    fov = sensor.fov
    r_max = math.hypot(fov.max_range, sensor.z) + dr
    lo, hi = sensor.elevation_bounds
    n_az = max(1, int(round(2 * fov.azimuth_half_angle / math.radians(daz_deg))))
    n_el = max(1, int(round((hi - lo) / math.radians(del_deg))))
    return SphericalGridSpec(0.0, r_max, int(math.ceil(r_max / dr)), -fov.azimuth_half_angle,
                             fov.azimuth_half_angle, n_az, lo, hi, n_el)


DEFAULT_SIZE_PRIOR = {"car": (4.5, 1.8, 1.5), "truck": (16.0, 2.5, 4.0)}


@dataclass
class PipelineConfig:
    grid: GridSpec2D
    spherical: Optional[SphericalGridSpec] = None
    voxel: Optional[VoxelGridSpec] = None
    radar_filter: RadarFilterConfig = field(default_factory=RadarFilterConfig)
    ism: IsmConfig = field(default_factory=IsmConfig)
    ism_spherical: IsmConfig = field(default_factory=IsmConfig)
    decay: DecayConfig = field(default_factory=DecayConfig)
    threshold: float = 0.6
    slice_height: float = 1.0
    squash_band: tuple[float, float] = (0.0, 4.0)
    camera: Optional[PinholeCamera] = None
    size_prior: Mapping[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_SIZE_PRIOR))
    occupied_value: float = 0.9
    graded: bool = False
    reference_variant: str = "spherical"
    reference_margin: float = 0.0
    mask_height: Optional[float] = None


@dataclass
class EstimatorPipeline:
    name: str
    sensor: SensorPose
    config: PipelineConfig
    state: Optional[ScalarGrid] = None
    warnings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; choose from {ESTIMATORS}")
        cfg = self.config
        if self.name in ("radar3d", "reference") and cfg.spherical is None:
            cfg.spherical = default_spherical_spec(self.sensor)
        if self.name == "camera3d":
            if cfg.voxel is None:
                cfg.voxel = VoxelGridSpec(cfg.grid, 0.0, 5.0, 10)
            if cfg.camera is None:
                cfg.camera = PinholeCamera(self.sensor)
            if cfg.mask_height is None:
                cfg.mask_height = 0.0
        if self.state is None:
            self.state = self._fresh_state()

    def _fresh_state(self):
        cfg = self.config
        if self.name == "radar2d":
            return ScalarGrid.full(cfg.grid, UNKNOWN)
        if self.name == "radar3d":
            return ScalarGrid.full(cfg.spherical, UNKNOWN)
        if self.name == "camera3d":
            return ScalarGrid.full(cfg.voxel, UNKNOWN)
        return None

    def reset(self):
        self.state = self._fresh_state()
        self.warnings.clear()

    def warn(self, key):
        self.warnings[key] = self.warnings.get(key, 0) + 1

    def step(self, frame, dt: float = 0.0, t: float = 0.0) -> VisibilityGrid2D:
        runner = {"radar2d": run_radar2d, "radar3d": run_radar3d,
                  "camera3d": run_camera3d}.get(self.name)
        if runner is None:
            out = run_reference(self, frame)
        else:
            out = runner(self, frame, dt)
        out.t = t
        return out

    @property
    def output_mask(self) -> np.ndarray:
        """Cells the pipeline may claim: wholly inside the ground FoV wedge and,
        if ``mask_height`` is set, with all four corners at that height inside
        the sensor's 3D FoV."""
        grid, h = self.config.grid, self.config.mask_height
        mask = fov_mask_2d(grid, self.sensor)
        if h is not None:
            x, y = grid.centers()
            r = grid.resolution / 2
            for sx in (-r, r):
                for sy in (-r, r):
                    mask &= in_fov(self.sensor, x + sx, y + sy, np.full(x.shape, float(h)))
        return mask


def _require(pipeline, name):
    if pipeline.name != name:
        raise ValueError(f"pipeline is {pipeline.name!r}, expected {name!r}")


def run_radar2d(pipeline: EstimatorPipeline, frame: Sequence[Measurement], dt: float) -> VisibilityGrid2D:
    _require(pipeline, "radar2d")
    cfg, sensor = pipeline.config, pipeline.sensor
    frame = preprocess_radar(frame, cfg.radar_filter, sensor)
    state = apply_decay(pipeline.state, dt, cfg.decay)
    for z in frame:
        state = ism_update_cartesian(state, z.to_cartesian(sensor), cfg.ism, sensor)
    pipeline.state = state
    return raytrace_2d(state, sensor, sensor.fov, cfg.threshold)


def _spherical_to_output(pipeline: EstimatorPipeline, vis_sph: ScalarGrid) -> VisibilityGrid2D:
    cfg, sensor = pipeline.config, pipeline.sensor
    polar = slice_at_height(vis_sph, sensor, cfg.slice_height)
    cart = resample_polar_to_cartesian(polar, sensor, cfg.grid)
    mask = cart.mask & pipeline.output_mask
    return VisibilityGrid2D(cfg.grid, np.where(mask, cart.values, UNKNOWN), mask)


def run_radar3d(pipeline: EstimatorPipeline, frame: Sequence[Measurement], dt: float) -> VisibilityGrid2D:
    _require(pipeline, "radar3d")
    cfg, sensor = pipeline.config, pipeline.sensor
    frame = preprocess_radar(frame, cfg.radar_filter, sensor)
    state = apply_decay(pipeline.state, dt, cfg.decay)
    spec = cfg.spherical
    for z in frame:
        zp = z.to_polar(sensor)
        if spec.bin_of(zp.r, zp.azimuth, zp.elevation) is None:
            pipeline.warn("measurement_outside_grid")
            continue
        state = ism_update_spherical(state, zp, cfg.ism_spherical, inplace=True)
    pipeline.state = state
    return _spherical_to_output(pipeline, raytrace_spherical(state, cfg.threshold, cfg.graded))


def run_camera3d(pipeline: EstimatorPipeline, frame: Sequence[BoundingBox2D], dt: float) -> VisibilityGrid2D:
    _require(pipeline, "camera3d")
    cfg, sensor = pipeline.config, pipeline.sensor
    h = cfg.camera.ground_homography()
    base = cfg.grid
    boxes = []
    for det in frame:
        try:
            b3 = estimate_box3d(det, h, cfg.size_prior)
        except (ValueError, KeyError) as exc:
            pipeline.warn("unprojectable_detection")
            log.debug("dropping detection %s: %s", det, exc)
            continue
        gx, gy = base.to_index_space(b3.x, b3.y)
        if not (0 <= gx < base.width and 0 <= gy < base.height):
            pipeline.warn("detection_outside_grid")
            continue
        boxes.append(b3)
    state = apply_decay(pipeline.state, dt, cfg.decay)
    state = voxelize_boxes(state, boxes, cfg.occupied_value)
    pipeline.state = state
    vis3d = raytrace_voxels(state, sensor, cfg.threshold, fov_limited=True)
    lo, hi = cfg.squash_band
    return squash_z_average(vis3d, lo, hi, pipeline.output_mask)


def run_reference(pipeline: EstimatorPipeline, gt_objects) -> VisibilityGrid2D:
    """Visibility from a perfect occupancy grid rasterised from ground truth."""
    _require(pipeline, "reference")
    cfg, sensor = pipeline.config, pipeline.sensor
    if cfg.reference_variant == "2d":
        occ = rasterize_footprints_2d(cfg.grid, gt_objects)
        return raytrace_2d(occ, sensor, sensor.fov, cfg.threshold)
    boxes = np.array([o.box_row() for o in gt_objects]).reshape(-1, 7)
    occ = rasterize_boxes_spherical(cfg.spherical, sensor, boxes, cfg.reference_margin)
    return _spherical_to_output(pipeline, raytrace_spherical(occ, cfg.threshold, cfg.graded))
