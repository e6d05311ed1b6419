import math
import time

import numpy as np
import pytest

from visigrid.geometry import FovSpec, SensorPose
from visigrid.metrics import ObjectState
from visigrid.sensors import PinholeCamera
from visigrid.simulator import (GroundTruthLog, RadarDetectionModel, SceneConfig, VehicleSpec, generate_scene,
                                occlusion_oracle, project_box, simulate_camera, simulate_radar)

SENSOR = SensorPose(0.0, 0.0, 6.0, fov=FovSpec(150.0, math.radians(20), math.radians(-15), math.radians(5)))


def car(id, x, y=0.0, **kw):
    return ObjectState(id, 0.0, x, y, **kw)


class TestSceneConfig:
    def test_frame_count(self):
        assert SceneConfig(duration=60.0, frame_rate=10.0).n_frames == 600
        log = generate_scene(SceneConfig(duration=6.0), sensors=False)
        assert len(log.times) == len(log.objects) == 60

    def test_same_seed_is_bit_identical(self):
        a = generate_scene(SceneConfig(duration=5.0, seed=3))
        b = generate_scene(SceneConfig(duration=5.0, seed=3))
        assert a.objects == b.objects and a.occluded == b.occluded
        assert a.measurements == b.measurements and a.boxes == b.boxes

    def test_different_seed_differs(self):
        a = generate_scene(SceneConfig(duration=5.0, seed=3), sensors=False)
        b = generate_scene(SceneConfig(duration=5.0, seed=4), sensors=False)
        assert a.objects != b.objects

    def test_dense_scene_under_a_second(self):
        cfg = SceneConfig(n_vehicles=41, duration=60.0)
        best = math.inf
        for _ in range(3):
            t = time.perf_counter()
            log = generate_scene(cfg, sensors=False)
            best = min(best, time.perf_counter() - t)
        assert len({o.id for f in log.objects for o in f}) == 41
        assert best < 1.0

    def test_vehicles_keep_lane_and_speed(self):
        log = generate_scene(SceneConfig(duration=10.0, seed=1), sensors=False)
        tracks = {}
        for f in log.objects:
            for o in f:
                tracks.setdefault(o.id, []).append(o)
        for states in tracks.values():
            assert len({s.y for s in states}) == 1
            for a, b in zip(states, states[1:]):
                assert b.x - a.x == pytest.approx(a.vx * (b.t - a.t))

    def test_no_overlaps_within_a_lane(self):
        log = generate_scene(SceneConfig(seed=2), sensors=False)
        for f in log.objects:
            by_lane = {}
            for o in f:
                by_lane.setdefault(o.y, []).append(o)
            for objs in by_lane.values():
                objs.sort(key=lambda o: o.x)
                for a, b in zip(objs, objs[1:]):
                    assert b.x - b.length / 2 >= a.x + a.length / 2

    def test_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(duration=0.0)
        with pytest.raises(ValueError):
            SceneConfig(truck_ratio=1.5)
        with pytest.raises(ValueError):
            RadarDetectionModel(p_detect_visible=2.0)


class TestOracle:
    def test_alone_is_visible(self):
        t = car("t", 50.0)
        assert not occlusion_oracle([t], SENSOR, t)

    def test_tall_box_in_front_occludes(self):
        t = car("t", 50.0, height=1.5)
        wall = car("w", 25.0, length=4.0, width=8.0, height=8.0)
        # the wall spans the whole solid angle the target subtends
        assert not occlusion_oracle([wall, t], SENSOR, wall)
        assert occlusion_oracle([wall, t], SENSOR, t)

    def test_over_the_top(self):
        t = car("t", 100.0, height=1.5)
        low = car("o", 20.0, height=2.0)
        assert not occlusion_oracle([low, t], SENSOR, t)

    def test_fov_limited(self):
        t = car("t", 5.0)  # far below the -15 deg elevation bound
        assert not occlusion_oracle([t], SENSOR, t)
        assert occlusion_oracle([t], SENSOR, t, fov_limited=True)


def scripted(vehicles, duration=1.0, radar=RadarDetectionModel()):
    return generate_scene(SceneConfig(duration=duration, vehicles=tuple(vehicles), sensor=SENSOR, radar=radar))


class TestRadar:
    def test_one_noiseless_return_per_visible_object(self):
        log = scripted([VehicleSpec("a", 40.0, 0.0, -10.0), VehicleSpec("b", 60.0, 3.5, 12.0)])
        for objs, frame in zip(log.objects, log.measurements):
            assert sorted(m.source for m in frame) == sorted(o.id for o in objs)
            for m in frame:
                o = next(o for o in objs if o.id == m.source)
                assert o.footprint().distance(m.x, m.y) == 0.0
                assert m.doppler == pytest.approx(o.radial_speed(SENSOR, m.x, m.y, m.z))

    def test_occluded_object_emits_nothing(self):
        log = scripted([VehicleSpec("wall", 25.0, 0.0, 0.0, 4.0, 8.0, 8.0), VehicleSpec("t", 50.0, 0.0, 0.0)])
        assert all(occ["t"] for occ in log.occluded)
        assert not any(m.source == "t" for f in log.measurements for m in f)

    def test_stochastic_ratio(self):
        log = scripted([VehicleSpec(f"v{k}", 20.0 + 8.0 * k, 3.5 * (k % 3 - 1), 0.0) for k in range(12)],
                       duration=100.0)
        hits = simulate_radar(log, RadarDetectionModel(p_detect_visible=0.9, deterministic=False), seed=0)
        n = sum(not occ[o.id] for objs, occ in zip(log.objects, log.occluded) for o in objs)
        got = len({(k, m.source) for k, f in enumerate(hits) for m in f})
        assert n >= 10_000
        assert 0.89 <= got / n <= 0.91

    def test_clutter_and_noise(self):
        log = scripted([VehicleSpec("a", 40.0, 0.0, -10.0)], duration=5.0)
        model = RadarDetectionModel(position_sigma=0.2, doppler_sigma=0.1, deterministic=False, clutter_rate=2.0,
                                    extra_returns_mean=1.0)
        frames = simulate_radar(log, model, seed=1)
        assert any(m.source is None for f in frames for m in f)
        assert sum(m.source == "a" for f in frames for m in f) > len(frames)


class TestCamera:
    cam = PinholeCamera(SENSOR)

    def test_behind_camera(self):
        assert project_box(self.cam, car("b", -20.0)) is None

    def test_manual_projection_of_a_cube(self):
        cam = PinholeCamera(SensorPose(0.0, 0.0, 1.0), fx=1000, fy=1000, cx=500, cy=500, image_width=1000,
                            image_height=1000)
        cube = ObjectState("q", 0.0, 11.0, 0.0, length=2.0, width=2.0, height=2.0)
        box = project_box(cam, cube)
        # nearest face at depth 10, farthest at 12; y in [-1, 1]; z in [0, 2] around the camera height 1
        assert box.u_min == pytest.approx(500 - 1000 * 1 / 10)
        assert box.u_max == pytest.approx(500 + 1000 * 1 / 10)
        assert box.v_min == pytest.approx(500 - 1000 * 1 / 10)
        assert box.v_max == pytest.approx(500 + 1000 * 1 / 10)

    def test_range_gate(self):
        log = scripted([VehicleSpec("near", 60.0, 0.0, 0.0), VehicleSpec("far", 120.0, 3.5, 0.0)])
        srcs = {b.source for f in log.boxes for b in f}
        assert srcs == {"near"}

    def test_occluded_objects_omitted(self):
        log = scripted([VehicleSpec("wall", 25.0, 0.0, 0.0, 4.0, 8.0, 8.0), VehicleSpec("t", 50.0, 0.0, 0.0)])
        assert {b.source for f in log.boxes for b in f} == {"wall"}

    def test_simulate_camera_custom_distance(self):
        log = scripted([VehicleSpec("a", 60.0, 0.0, 0.0)])
        assert all(f == [] for f in simulate_camera(log, self.cam, max_distance=30.0))


def test_occluded_fraction():
    log = GroundTruthLog(np.array([0.0]), [[car("a", 50.0), car("b", 70.0)]], [{"a": False, "b": True}],
                         [[]], [[]], SENSOR)
    assert log.occluded_fraction() == 0.5
