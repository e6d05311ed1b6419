import math
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visigrid import dataio
from visigrid.geometry import (UNKNOWN, FovSpec, GridSpec2D, ScalarGrid, SensorPose, SphericalGridSpec,
                               cell_center, world_to_cell)
from visigrid.metrics import AssociationTolerance, ConfusionCounts, ObjectState, detection_status, rates
from visigrid.sensors import DecayConfig, IsmConfig, Measurement, apply_decay, ism_update_cartesian
from visigrid.visibility import raytrace_2d, raytrace_spherical

settings.register_profile("visigrid", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("visigrid")

ALL_AROUND = FovSpec(100.0, math.pi)
counts = st.builds(ConfusionCounts, *[st.integers(0, 500)] * 4)
unit = st.floats(0.0, 1.0)


@st.composite
def occupancy_2d(draw):
    w, h = draw(st.integers(2, 16)), draw(st.integers(2, 16))
    occ = draw(arrays(np.float64, (w, h), elements=unit))
    sx = draw(st.floats(0.01, w - 0.01))
    sy = draw(st.floats(0.01, h - 0.01))
    return GridSpec2D(0.0, 0.0, w, h, 1.0), occ, SensorPose(sx, sy, 1.0, fov=ALL_AROUND)


@given(occupancy_2d(), st.data())
def test_extra_obstacle_never_reveals(case, data):
    spec, occ, sensor = case
    before = raytrace_2d(ScalarGrid(spec, occ), sensor).values
    i = data.draw(st.integers(0, spec.width - 1))
    j = data.draw(st.integers(0, spec.height - 1))
    more = occ.copy()
    more[i, j] = 1.0
    after = raytrace_2d(ScalarGrid(spec, more), sensor).values
    assert np.all(after <= before)


@given(occupancy_2d())
def test_sensor_cell_and_free_grid(case):
    spec, occ, sensor = case
    free = raytrace_2d(ScalarGrid(spec, np.zeros(spec.shape)), sensor)
    assert np.all(free.values[free.fov_mask] == 1.0)
    vis = raytrace_2d(ScalarGrid(spec, occ), sensor)
    assert vis.values[world_to_cell(spec, (sensor.x, sensor.y))] == 1.0


SPH = SphericalGridSpec(0.0, 20.0, 20, -0.3, 0.3, 4, -0.2, 0.2, 3)


@given(arrays(np.float64, SPH.shape, elements=unit), st.integers(0, 3), st.integers(0, 2), st.booleans(),
       arrays(np.float64, (SPH.shape[0],), elements=unit))
def test_rays_are_independent(occ, a, e, graded, new_ray):
    base = raytrace_spherical(ScalarGrid(SPH, occ), graded=graded).values
    occ2 = occ.copy()
    occ2[:, a, e] = new_ray
    moved = raytrace_spherical(ScalarGrid(SPH, occ2), graded=graded).values
    others = np.ones(SPH.shape[1:], bool)
    others[a, e] = False
    assert np.array_equal(base[:, others], moved[:, others])


@given(arrays(np.float64, SPH.shape, elements=unit), st.booleans())
def test_visibility_never_increases_with_range(occ, graded):
    vis = raytrace_spherical(ScalarGrid(SPH, occ), graded=graded).values
    assert np.all(np.diff(vis, axis=0) <= 1e-12)
    assert np.all((vis >= 0) & (vis <= 1))


@given(counts)
def test_rate_identities(c):
    r = rates(c, exact=True)
    if c.tv + c.fi:
        assert r.tvr + r.fir == 1
    if c.fv + c.ti:
        assert r.fvr + r.tir == 1
        assert r.fvr == Fraction(c.fv, c.fv + c.ti)
    f = rates(c)
    for k in ("tvr", "fvr", "tir", "fir"):
        ex, fl = getattr(r, k), getattr(f, k)
        assert (ex is None) == (fl is None)
        if ex is not None:
            assert abs(float(ex) - fl) <= 1e-12


@given(counts, counts, counts)
def test_counts_form_a_commutative_monoid(a, b, c):
    assert a + b == b + a and (a + b) + c == a + (b + c) and a + ConfusionCounts() == a
    assert (a + b).total == a.total + b.total


SENSOR = SensorPose(0.0, 0.0, 6.0)


@st.composite
def object_and_returns(draw):
    o = ObjectState("o", 0.0, draw(st.floats(10, 90)), draw(st.floats(-10, 10)), draw(st.floats(-math.pi, math.pi)),
                    draw(st.floats(-30, 30)), 0.0)
    n = draw(st.integers(0, 6))
    frame = [Measurement(x=o.x + draw(st.floats(-5, 5)), y=o.y + draw(st.floats(-5, 5)), z=draw(st.floats(0, 2)),
                         doppler=draw(st.floats(-30, 30))) for _ in range(n)]
    return o, frame


@given(object_and_returns(), st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0, 2), st.floats(0, 2))
def test_detection_monotone_in_tolerance(case, r, d, dr, dd):
    o, frame = case
    if detection_status(o, frame, AssociationTolerance(r, d), SENSOR):
        assert detection_status(o, frame, AssociationTolerance(r + dr, d + dd), SENSOR)


@given(object_and_returns(), st.randoms())
def test_detection_ignores_return_order(case, rnd):
    o, frame = case
    tol = AssociationTolerance(1.0, 1.0)
    shuffled = frame[:]
    rnd.shuffle(shuffled)
    assert detection_status(o, frame, tol, SENSOR) == detection_status(o, shuffled, tol, SENSOR)


DSPEC = GridSpec2D(0, 0, 5, 4, 1.0)


@given(arrays(np.float64, DSPEC.shape, elements=unit), st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
def test_decay_contracts_and_composes(v, rate, t1, t2):
    cfg = DecayConfig(rate)
    g = ScalarGrid(DSPEC, v)
    one = apply_decay(g, t1, cfg).values
    assert np.all(np.abs(one - UNKNOWN) <= np.abs(v - UNKNOWN) + 1e-15)
    two = apply_decay(apply_decay(g, t1, cfg), t2, cfg).values
    assert np.allclose(two, apply_decay(g, t1 + t2, cfg).values, atol=1e-12)
    fixed = apply_decay(ScalarGrid.full(DSPEC, UNKNOWN), t1, cfg).values
    assert np.all(fixed == UNKNOWN)


ISPEC = GridSpec2D(0.0, -10.0, 30, 20, 1.0)


@given(st.floats(3, 28), st.floats(-8, 8), st.floats(0.2, 1.0))
def test_ism_changes_stay_local(x, y, sigma):
    sensor = SensorPose(0.0, 0.0, 0.0)
    cfg = IsmConfig(covariance=((sigma ** 2, 0.0), (0.0, sigma ** 2)))
    g = ism_update_cartesian(ScalarGrid.full(ISPEC, UNKNOWN), Measurement(x=x, y=y, z=0.0), cfg, sensor)
    cx, cy = ISPEC.centers()
    changed = g.values != UNKNOWN
    near = np.hypot(cx - x, cy - y) <= 3 * sigma + 1e-9
    # free-space cells lie within half a diagonal of the sensor-to-return ray
    rng_ = math.hypot(x, y)
    ux, uy = x / rng_, y / rng_
    along = cx * ux + cy * uy
    across = np.abs(-cx * uy + cy * ux)
    on_ray = (along >= -1.0) & (along <= rng_ + 1.0) & (across <= math.sqrt(0.5) + 1e-9)
    assert not np.any(changed & ~near & ~on_ray)
    assert np.all(g.values[changed & ~near] < UNKNOWN)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.1, 5), st.integers(1, 50), st.integers(1, 50),
       st.data())
def test_cell_centre_round_trip(ox, oy, res, w, h, data):
    spec = GridSpec2D(ox, oy, w, h, res)
    i, j = data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1))
    assert world_to_cell(spec, cell_center(spec, (i, j))) == (i, j)


@given(st.floats(1, 100), st.floats(-1.5, 1.5), st.floats(-0.7, 0.3), st.floats(-20, 20))
def test_polar_round_trip(r, az, el, dop):
    s = SensorPose(3.0, -2.0, 5.0, 0.3)
    m = Measurement(r=r, azimuth=az, elevation=el, doppler=dop)
    back = m.to_cartesian(s).to_polar(s)
    assert math.isclose(back.r, r, rel_tol=1e-9)
    assert math.isclose(back.azimuth, az, abs_tol=1e-9) and math.isclose(back.elevation, el, abs_tol=1e-9)
    assert back.doppler == dop


@settings(max_examples=25)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_grid_file_round_trip(w, h, data):
    spec = GridSpec2D(data.draw(st.floats(-50, 50)), data.draw(st.floats(-50, 50)), w, h,
                      data.draw(st.floats(0.1, 2)))
    v = data.draw(arrays(np.float64, (w, h), elements=unit))
    m = data.draw(arrays(np.bool_, (w, h)))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "g.vgrd"
        dataio.save_grid(p, dataio.GridSnapshot(spec, v, m, 0.0))
        back = dataio.load_grid(p)
    assert back.spec == spec and np.array_equal(back.mask, m)
    assert np.abs(back.values - v).max() <= 2 ** -15


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=6),
       st.floats(0.1, 5))
def test_label_knots_survive_io(pts, dt):
    knots = [(k * dt, x, y) for k, (x, y) in enumerate(pts)]
    lf = dataio.LabelFile([dataio.LabelTrack("a", knots)])
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "l.jsonl"
        dataio.save_labels(p, lf)
        back = dataio.load_labels(p)
    assert np.array_equal(back.tracks[0].knots, lf.tracks[0].knots)
