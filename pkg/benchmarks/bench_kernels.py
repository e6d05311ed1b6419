"""Numba versus pure-numpy timings for the raytracing and rasterisation kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once per backend to warm up (numba compiles on first call),
then the best of N timed runs is reported, along with a check that both
backends return the same array.
"""
import argparse
import math
import time

import numpy as np

from visigrid import kernels
from visigrid._accel import HAVE_NUMBA, use_backend
from visigrid.simulator import SceneConfig, generate_scene
from visigrid.visibility import default_spherical_spec, rasterize_boxes_spherical


def _cases(rng):
    blocked2 = rng.uniform(size=(160, 32)) < 0.05
    targets2 = np.argwhere(np.ones((160, 32), bool))
    blocked3 = rng.uniform(size=(160, 32, 10)) < 0.02
    targets3 = np.argwhere(np.ones((160, 32, 10), bool))
    sensor = SceneConfig().sensor
    sph = default_spherical_spec(sensor)
    occ_sph = (rng.uniform(size=sph.shape) < 0.001).astype(float)
    log = generate_scene(SceneConfig(duration=1.0), sensors=False)
    boxes = np.array([o.box_row() for o in log.objects[0]])
    ends = np.column_stack([rng.uniform(0, 150, 20000), rng.uniform(-16, 16, 20000), rng.uniform(0, 4, 20000)])
    return {
        "dda 2d (160x32, all cells)": lambda: kernels.dda_visibility(blocked2, np.array([0.0, 10.75]), targets2),
        "dda 3d (160x32x10)": lambda: kernels.dda_visibility(blocked3, np.array([0.0, 10.75, 12.0]), targets3),
        f"scan rays {sph.shape}": lambda: kernels.scan_rays(occ_sph, 0.6),
        f"segments vs {len(boxes)} boxes (20k)": lambda: kernels.segments_blocked(sensor.position, ends, boxes),
        "rasterise boxes (spherical)": lambda: rasterize_boxes_spherical(sph, sensor, boxes).values,
    }


def _best(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<38} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, fn in cases.items():
        res, times = {}, {}
        for b in ("numpy", "numba"):
            with use_backend(b):
                res[b] = fn()
                times[b] = _best(fn, args.repeat)
        same = np.array_equal(res["numpy"], res["numba"])
        print(f"{name:<38} {1e3 * times['numpy']:10.2f} {1e3 * times['numba']:10.2f} "
              f"{times['numpy'] / times['numba']:8.1f}x  {same}")


if __name__ == "__main__":
    main()
