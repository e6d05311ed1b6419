import math

import numpy as np
import pytest

from visigrid.geometry import (UNKNOWN, FovSpec, GridSpec2D, ScalarGrid, SensorPose, SphericalGridSpec,
                               VoxelGridSpec, cells_overlapping)
from visigrid.metrics import ObjectState
from visigrid.sensors import BoundingBox2D, Measurement, PinholeCamera
from visigrid.simulator import facing_samples, project_box
from visigrid.visibility import (EstimatorPipeline, PipelineConfig, VisibilityGrid2D, _spherical_to_output,
                                 default_spherical_spec, object_visibility, rasterize_boxes_spherical,
                                 raytrace_2d, raytrace_spherical, raytrace_voxels, squash_z_average)


def seg_hits_box(p0, p1, box):
    """Independent oracle: does the open segment p0->p1 pass through the box interior?

    ``box`` is (cx, cy, yaw, length, width, height, z_base).
    """
    cx, cy, yaw, ln, wd, ht, zb = box
    c, s = math.cos(yaw), math.sin(yaw)

    def local(p):
        dx, dy = p[0] - cx, p[1] - cy
        return np.array([c * dx + s * dy, -s * dx + c * dy, p[2] - zb - ht / 2])

    a, b = local(p0), local(p1)
    half = np.array([ln / 2, wd / 2, ht / 2])
    d = b - a
    t0, t1 = 0.0, 1.0
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if abs(a[k]) >= half[k]:
                return False
            continue
        u, v = (-half[k] - a[k]) / d[k], (half[k] - a[k]) / d[k]
        t0, t1 = max(t0, min(u, v)), min(t1, max(u, v))
    return t1 - t0 > 1e-9


# --------------------------------------------------------------------------
# raytracers


class TestRaytrace2D:
    spec = GridSpec2D(-0.5, -5.5, 20, 11, 1.0)
    sensor = SensorPose(0.0, 0.0, 0.0, fov=FovSpec(30.0, math.radians(40)))

    def test_all_free_is_visible_up_to_fov(self):
        vis = raytrace_2d(ScalarGrid.full(self.spec, 0.0), self.sensor)
        assert vis.fov_mask.any()
        assert np.all(vis.values[vis.fov_mask] == 1.0)
        assert np.all(vis.values[~vis.fov_mask] == 0.0)

    def test_collinear_blocking(self):
        occ = np.zeros(self.spec.shape)
        occ[5, 5] = 1.0  # cell centred on (5, 0)
        vis = raytrace_2d(ScalarGrid(self.spec, occ), self.sensor)
        assert vis.values[10, 5] == 0.0
        assert vis.values[5, 5] == 1.0  # the blocked cell itself is seen
        assert vis.values[4, 5] == 1.0

    def test_threshold(self):
        occ = np.zeros(self.spec.shape)
        occ[5, 5] = 0.65
        assert raytrace_2d(ScalarGrid(self.spec, occ), self.sensor, thr=0.6).values[10, 5] == 0.0
        assert raytrace_2d(ScalarGrid(self.spec, occ), self.sensor, thr=0.7).values[10, 5] == 1.0


class TestRaytraceSpherical:
    spec = SphericalGridSpec(0.0, 10.0, 20, -0.5, 0.5, 4, -0.2, 0.2, 3)

    def test_all_free(self):
        out = raytrace_spherical(ScalarGrid.full(self.spec, 0.0))
        assert np.all(out.values == 1.0)

    def test_single_bin_per_ray(self):
        occ = np.zeros(self.spec.shape)
        occ[7, 2, 1] = 1.0
        out = raytrace_spherical(ScalarGrid(self.spec, occ)).values
        assert np.all(out[:8, 2, 1] == 1.0) and np.all(out[8:, 2, 1] == 0.0)
        other = np.ones(self.spec.shape, bool)
        other[:, 2, 1] = False
        assert np.all(out[other] == 1.0)

    def test_graded_transmission(self):
        occ = np.zeros(self.spec.shape)
        occ[3, 0, 0] = occ[6, 0, 0] = 0.75
        out = raytrace_spherical(ScalarGrid(self.spec, occ), graded=True).values
        assert out[5, 0, 0] == pytest.approx(0.5)
        assert out[7:, 0, 0] == pytest.approx(0.25)


class TestRaytraceVoxels:
    spec = VoxelGridSpec(GridSpec2D(0.0, -5.0, 40, 10, 1.0), 0.0, 5.0, 10)
    sensor = SensorPose(0.0, 0.0, 6.0)

    def test_empty_volume(self):
        assert np.all(raytrace_voxels(ScalarGrid.full(self.spec, 0.0), self.sensor).values == 1.0)

    def test_occluder_against_segment_oracle(self):
        box = (10.5, 0.5, 0.0, 1.0, 3.0, 2.0, 0.0)
        occ = np.zeros(self.spec.shape)
        occ[10, 4:7, :4] = 1.0  # x 10..11, y -1..2, z 0..2
        vis = raytrace_voxels(ScalarGrid(self.spec, occ), self.sensor).values
        ground = (13, 5, 0)   # (13.5, 0.5, 0.25): ray is at 1.6 m when it reaches x=10.5
        high = (39, 5, 6)      # (39.5, 0.5, 3.25): clears the occluder
        for idx, want in ((ground, False), (high, True)):
            x, y = self.spec.base.cell_center(idx[0], idx[1])
            z = self.spec.z_centers()[idx[2]]
            assert seg_hits_box(self.sensor.position, (x, y, z), box) is not want
            assert bool(vis[idx] == 1.0) is want

    def test_occluder_behind_target(self):
        occ = np.zeros(self.spec.shape)
        occ[30, 5, :4] = 1.0
        assert raytrace_voxels(ScalarGrid(self.spec, occ), self.sensor).values[20, 5, 0] == 1.0

    def test_fov_limited(self):
        s = SensorPose(0.0, 0.0, 6.0, fov=FovSpec(100.0, 0.3, math.radians(-20), math.radians(20)))
        vis = raytrace_voxels(ScalarGrid.full(self.spec, 0.0), s, fov_limited=True).values
        assert vis[2, 5, 0] == 0.0   # far below the frustum
        assert vis[30, 5, 0] == 1.0


class TestSquash:
    spec = VoxelGridSpec(GridSpec2D(0.0, 0.0, 4, 3, 1.0), 0.0, 4.0, 8)

    def test_all_ones(self):
        assert np.all(squash_z_average(ScalarGrid.full(self.spec, 1.0)).values == 1.0)

    def test_half(self):
        v = np.zeros(self.spec.shape)
        v[:, :, ::2] = 1.0
        assert np.allclose(squash_z_average(ScalarGrid(self.spec, v)).values, 0.5)

    def test_random_column_mean(self):
        v = np.random.default_rng(0).uniform(size=self.spec.shape)
        out = squash_z_average(ScalarGrid(self.spec, v), 1.0, 3.0).values
        zc = self.spec.z_centers()
        for i in range(4):
            for j in range(3):
                col = [v[i, j, k] for k in range(8) if 1.0 <= zc[k] <= 3.0]
                assert out[i, j] == pytest.approx(sum(col) / len(col))

    def test_empty_band(self):
        with pytest.raises(ValueError):
            squash_z_average(ScalarGrid.full(self.spec, 1.0), 10.0, 12.0)


class TestObjectVisibility:
    spec = GridSpec2D(0.0, 0.0, 10, 10, 1.0)
    obj = ObjectState("a", 0.0, 5.0, 5.0, 0.0, length=2.0, width=2.0)

    def grid(self, values):
        return VisibilityGrid2D(self.spec, values, np.ones(self.spec.shape, bool))

    def test_all_zero(self):
        assert not object_visibility(self.grid(np.zeros((10, 10))), self.obj)

    def test_one_cell_suffices(self):
        v = np.zeros((10, 10))
        v[4, 5] = 1.0
        assert object_visibility(self.grid(v), self.obj)

    def test_threshold(self):
        v = np.full((10, 10), 0.6)
        assert object_visibility(self.grid(v), self.obj, 0.5)
        assert not object_visibility(self.grid(v), self.obj, 0.7)

    def test_masked_cells_do_not_count(self):
        g = VisibilityGrid2D(self.spec, np.ones((10, 10)), np.zeros((10, 10), bool))
        assert not object_visibility(g, self.obj)

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            object_visibility(self.grid(np.ones((10, 10))), ObjectState("b", 0, 50, 50))


# --------------------------------------------------------------------------
# pipelines


SENSOR = SensorPose(0.0, 0.0, 6.0, fov=FovSpec(100.0, math.radians(20), math.radians(-15), math.radians(5)))
GRID = GridSpec2D(0.0, -16.0, 100, 32, 1.0)


def pipeline(name, sensor=SENSOR, **kw):
    return EstimatorPipeline(name, sensor, PipelineConfig(grid=GRID, **kw))


def returns_from(obj, sensor, t=0.0):
    pts = facing_samples(obj, sensor.position)
    return [Measurement(x=float(p[0]), y=float(p[1]), z=float(p[2]), timestamp=t) for p in pts]


def ground_shadow(obj, sensor, spec, h):
    """Per cell: does the segment from the sensor to the cell centre lifted to ``h`` hit the object box?"""
    box = (obj.x, obj.y, obj.yaw, obj.length, obj.width, obj.height, 0.0)
    out = np.zeros(spec.shape, bool)
    for i in range(spec.width):
        for j in range(spec.height):
            x, y = spec.cell_center(i, j)
            out[i, j] = seg_hits_box(sensor.position, (x, y, h), box)
    return out


def interior(mask):
    """Cells whose whole 3x3 neighbourhood lies in ``mask``."""
    pad = np.pad(mask, 1, constant_values=True)
    out = np.ones(mask.shape, bool)
    for di in range(3):
        for dj in range(3):
            out &= pad[di:di + mask.shape[0], dj:dj + mask.shape[1]]
    return out


def near_boundary(mask, i, j):
    sl = mask[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
    return sl.any() and not sl.all()


class TestRadar2D:
    def test_first_frame_without_measurements(self):
        p = pipeline("radar2d")
        out = p.step([], 0.0)
        assert np.all(p.state.values == UNKNOWN)
        assert np.all(out.values[out.fov_mask] == 1.0)

    def test_truck_cluster_shadow(self):
        truck = ObjectState("t", 0.0, 38.0, 0.0, 0.0, length=16.0, width=2.5, height=4.0, label="truck")
        p = pipeline("radar2d")
        out = p.step(returns_from(truck, SENSOR), 0.1)
        # planar shadow of the footprint, as seen from the sensor's ground position
        flat = SensorPose(SENSOR.x, SENSOR.y, 1.0)
        shadow = ground_shadow(ObjectState("t", 0, 38.0, 0.0, 0.0, 16.0, 2.5, 100.0), flat, GRID, 1.0)
        behind = shadow & (GRID.centers()[0] > 50.0) & out.fov_mask
        assert behind.sum() > 20
        assert np.all(out.values[behind] == 0.0)
        front = out.fov_mask & (GRID.centers()[0] < 25.0)
        assert np.all(out.values[front] == 1.0)

    def test_repeated_frames_reach_a_fixed_point(self):
        car = ObjectState("c", 0.0, 40.0, 1.0)
        frame = returns_from(car, SENSOR)[:5]
        p = pipeline("radar2d")
        outs = [p.step(frame, 0.1).values.copy() for _ in range(30)]
        assert all(np.array_equal(outs[10], o) for o in outs[10:])


class TestRadar3D:
    def test_over_the_top(self):
        occluder = ObjectState("o", 0.0, 20.0, 0.0, height=2.0)
        target = ObjectState("t", 0.0, 90.0, 0.0, height=1.5)
        frame = [Measurement(x=20.0, y=0.0, z=1.0), Measurement(x=90.0, y=0.0, z=0.75)]
        p3, p2 = pipeline("radar3d"), pipeline("radar2d")
        for _ in range(5):
            o3, o2 = p3.step(frame, 0.1), p2.step(frame, 0.1)
        assert object_visibility(o3, target)
        assert not object_visibility(o2, target)
        assert object_visibility(o3, occluder) and object_visibility(o2, occluder)

    def test_near_range_below_elevation_bound(self):
        out = pipeline("radar3d").step([], 0.0)
        # at h = 1 m the lower bound of -15 deg is reached at 5 / tan(15 deg) = 18.7 m
        i_near = 10
        assert not out.fov_mask[i_near, 16]
        assert not object_visibility(out, ObjectState("n", 0.0, 10.0, 0.0))
        assert out.fov_mask[30, 16] and out.values[30, 16] == 1.0


class TestCamera3D:
    cam_sensor = SensorPose(0.0, 0.0, 6.0, fov=PinholeCamera(SENSOR).fov(100.0))

    def test_no_detections(self):
        out = pipeline("camera3d", self.cam_sensor).step([], 0.0)
        assert out.fov_mask.any()
        assert np.all(out.values[out.fov_mask] == 1.0)

    def test_truck_shadow_matches_3d_oracle(self):
        truck = ObjectState("t", 0.0, 38.0, 0.0, 0.0, length=16.0, width=2.5, height=4.0, label="truck")
        p = pipeline("camera3d", self.cam_sensor)
        box = project_box(p.config.camera, truck)
        out = p.step([box], 0.0)
        # oracle: mean over the 0..4 m voxel layers of the unblocked fraction
        spec = p.config.voxel
        zc = [z for z in spec.z_centers() if z <= 4.0]
        oracle = np.mean([ground_shadow(truck, self.cam_sensor, GRID, z) for z in zc], axis=0)
        oracle = 1.0 - oracle
        # compare away from the shadow edge, where voxelisation of the box decides
        behind = out.fov_mask & (GRID.centers()[0] > 50.0) & interior(oracle <= 0.5)
        assert behind.sum() > 20
        assert np.all(out.values[behind] < 0.7)
        clear = out.fov_mask & interior(oracle == 1.0)
        assert clear.sum() > 500
        assert np.all(out.values[clear] == 1.0)

    def test_detection_projecting_outside_grid(self):
        p = pipeline("camera3d", self.cam_sensor)
        # bottom edge just under the horizon lands hundreds of metres away
        box = BoundingBox2D(900.0, 530.0, 1000.0, 545.0)
        out = p.step([box], 0.0)
        assert p.warnings == {"detection_outside_grid": 1}
        assert np.all(out.values[out.fov_mask] == 1.0)


class TestReference:
    def test_no_objects(self):
        out = pipeline("reference").step([], 0.0)
        assert np.all(out.values[out.fov_mask] == 1.0)

    def test_truck_shadow_wedge(self):
        truck = ObjectState("t", 0.0, 40.0, 2.0, 0.0, length=16.0, width=2.5, height=4.0, label="truck")
        out = pipeline("reference").step([truck], 0.0)
        oracle = ~ground_shadow(truck, SENSOR, GRID, 1.0)
        # the truck's own cells are visible by construction (its near face is seen)
        own = np.zeros(GRID.shape, bool)
        for c in cells_overlapping(GRID, truck.footprint()):
            own[c] = True
        m = out.fov_mask & ~own
        got = out.values >= 0.5
        bad = [(i, j) for i, j in np.argwhere(m & (got != oracle)) if not near_boundary(oracle, i, j)]
        assert (~oracle & m).sum() > 50
        assert bad == []
        assert (got == oracle)[m].mean() > 0.97

    def test_shares_the_radar3d_stack(self):
        truck = ObjectState("t", 0.0, 40.0, 2.0, 0.0, length=16.0, width=2.5, height=4.0)
        ref = pipeline("reference")
        r3 = pipeline("radar3d")
        out_ref = ref.step([truck], 0.0)
        occ = rasterize_boxes_spherical(ref.config.spherical, SENSOR, truck.box_row()[None])
        out_r3 = _spherical_to_output(r3, raytrace_spherical(occ, r3.config.threshold))
        assert np.array_equal(out_ref.values, out_r3.values)
        assert np.array_equal(out_ref.fov_mask, out_r3.fov_mask)

    def test_2d_variant_shadow_is_unbounded(self):
        car = ObjectState("c", 0.0, 20.0, 0.0, height=1.0)
        out = pipeline("reference", reference_variant="2d").step([car], 0.0)
        assert out.values[90, 16] == 0.0


def test_unknown_estimator():
    with pytest.raises(ValueError):
        pipeline("lidar")


def test_default_spherical_spec_covers_fov():
    spec = default_spherical_spec(SENSOR)
    assert spec.r_max >= math.hypot(100.0, 6.0)
    assert spec.azimuth_min == pytest.approx(-math.radians(20))
