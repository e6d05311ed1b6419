import os
import subprocess
import sys

import numpy as np
import pytest

from visigrid import _accel, kernels
from visigrid._accel import backend, set_backend, use_backend
from visigrid.harness import load_config, run_data_from_log, run_estimator
from visigrid.simulator import SceneConfig, generate_scene
from visigrid.visibility import default_spherical_spec, rasterize_boxes_spherical

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def both(fn):
    out = {}
    for b in ("numpy", "numba"):
        with use_backend(b):
            out[b] = fn()
    return out["numpy"], out["numba"]


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(11)


@pytest.mark.parametrize("seed", range(5))
def test_dda_2d(seed):
    r = np.random.default_rng(seed)
    blocked = r.uniform(size=(40, 25)) < 0.1
    start = r.uniform([0, 0], [40, 25])
    targets = np.argwhere(np.ones_like(blocked))
    a, b = both(lambda: kernels.dda_visibility(blocked, start, targets))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_dda_3d(seed):
    r = np.random.default_rng(seed)
    blocked = r.uniform(size=(30, 12, 6)) < 0.05
    start = r.uniform([0, 0, 0], [30, 12, 6])
    targets = np.argwhere(np.ones_like(blocked))
    a, b = both(lambda: kernels.dda_visibility(blocked, start, targets))
    assert np.array_equal(a, b)


def test_dda_start_on_cell_boundary():
    blocked = np.zeros((8, 8), bool)
    blocked[4, :] = True
    targets = np.argwhere(~blocked)
    a, b = both(lambda: kernels.dda_visibility(blocked, np.array([2.0, 3.0]), targets))
    assert np.array_equal(a, b)
    assert not a[targets[:, 0] > 4].any() and a[targets[:, 0] < 4].all()


def test_traverse_cells(rng):
    for _ in range(50):
        s, e = rng.uniform(-2, 22, 2), rng.uniform(-2, 22, 2)
        a, b = both(lambda: kernels.traverse_cells((20, 20), s, e))
        assert np.array_equal(a, b)


@pytest.mark.parametrize("graded", [False, True])
def test_scan_rays(rng, graded):
    occ = rng.uniform(size=(60, 9, 7))
    a, b = both(lambda: kernels.scan_rays(occ, 0.8, graded))
    assert np.array_equal(a, b)


def test_segments_blocked(rng):
    log = generate_scene(SceneConfig(duration=1.0, seed=2), sensors=False)
    boxes = np.array([o.box_row() for o in log.objects[0]])
    ends = np.column_stack([rng.uniform(0, 150, 3000), rng.uniform(-16, 16, 3000), rng.uniform(0, 4, 3000)])
    a, b = both(lambda: kernels.segments_blocked(np.array([0.0, -5.25, 6.0]), ends, boxes))
    assert a.any() and np.array_equal(a, b)


def test_rasterize_spherical():
    sensor = SceneConfig().sensor
    spec = default_spherical_spec(sensor)
    log = generate_scene(SceneConfig(duration=1.0, seed=3), sensors=False)
    boxes = np.array([o.box_row() for o in log.objects[0]])
    a, b = both(lambda: rasterize_boxes_spherical(spec, sensor, boxes).values)
    assert a.any() and np.array_equal(a, b)


@pytest.mark.parametrize("name", ["radar2d", "radar3d", "camera3d", "reference"])
def test_estimators_end_to_end(name):
    cfg = load_config()
    data = run_data_from_log(generate_scene(SceneConfig(duration=1.0, seed=6)))

    def run():
        return np.stack([g.values for g in run_estimator(cfg, name, data)])

    a, b = both(run)
    assert np.array_equal(a, b)


def test_use_backend_restores():
    before = backend()
    with use_backend("numpy"):
        assert backend() == "numpy"
        with use_backend("numba"):
            assert backend() == "numba"
        assert backend() == "numpy"
    assert backend() == before


def test_unknown_backend():
    with pytest.raises(ValueError):
        set_backend("cuda")


@pytest.mark.parametrize("flag,want", [("numpy", "numpy"), ("NumPy", "numpy"), ("numba", "numba")])
def test_env_flag(flag, want):
    env = dict(os.environ, VISIGRID_BACKEND=flag)
    out = subprocess.run([sys.executable, "-c", "import visigrid._accel as a; print(a.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == want
