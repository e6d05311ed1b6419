"""Command line: simulate | estimate | evaluate | compare | sweep | render.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import dataio
from .dataio import DataError, GridSnapshot, MeasurementLog, ReportFile
from .geometry import GridSpec2D
from .harness import (
    ConfigError,
    RunData,
    estimator_sensor,
    evaluate_outputs,
    load_config,
    run_estimator,
    run_sweep,
    scene_config,
)
from .simulator import generate_scene
from .visibility import ESTIMATORS

log = logging.getLogger("visigrid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# render palette (RGB)
VISIBLE = (220, 30, 30)
INVISIBLE = (30, 60, 220)
UNKNOWN_RGB = (255, 255, 255)
OBJECT_RGB = (0, 0, 0)
MEASUREMENT_RGB = (255, 200, 0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="visigrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--estimator", help="estimator name; compare accepts a comma separated list")
        return sp

    common(sub.add_parser("simulate", help="generate a synthetic scene and its logs"))
    common(sub.add_parser("estimate", help="run an estimator and write grid snapshots"))
    common(sub.add_parser("evaluate", help="score an estimator against ground truth"))
    common(sub.add_parser("compare", help="score several estimators side by side"))
    common(sub.add_parser("sweep", help="grid or random parameter search"))
    r = common(sub.add_parser("render", help="draw a grid snapshot as a PPM image"))
    r.add_argument("snapshot", type=Path)
    r.add_argument("--scale", type=int, default=4, help="pixels per cell")
    return p


def _resolve_config(args) -> dict:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    if args.estimator is not None and "," not in args.estimator:
        if args.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {args.estimator!r}; choose from {ESTIMATORS}")
        over["estimator"] = args.estimator
    return load_config(args.config, over)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg, out: Path):
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


def _input_path(cfg, key: str, default: str) -> Path:
    p = cfg["inputs"].get(key)
    path = Path(p) if p else Path(cfg["out"]) / default
    if not path.exists():
        raise DataError(f"input file {path} not found (run `visigrid simulate` or set inputs.{key})")
    return path


def load_run_data(cfg) -> RunData:
    radar = dataio.load_measurement_log(_input_path(cfg, "measurements", "measurements.jsonl"))
    boxes_path = _input_path(cfg, "boxes", "boxes.jsonl")
    boxes = dataio.load_measurement_log(boxes_path)
    if boxes.times != radar.times:
        raise DataError(f"{boxes_path}: frame times differ from the measurement log")
    labels = dataio.load_labels(_input_path(cfg, "labels", "labels.jsonl"))
    for w in labels.validate():
        log.warning("labels: %s", w)
    defaults = {k: tuple(v) for k, v in cfg["size_prior"].items()}
    objects = dataio.labels_to_objects(labels, radar.times, defaults)
    return RunData(list(radar.times), objects, radar.frames, boxes.frames)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg) -> dict:
    out = _out_dir(cfg)
    scene = generate_scene(scene_config(cfg))
    times = [float(t) for t in scene.times]
    dataio.save_measurement_log(out / "measurements.jsonl", MeasurementLog(times, scene.measurements, "radar"))
    dataio.save_measurement_log(out / "boxes.jsonl", MeasurementLog(times, scene.boxes, "camera"))
    dataio.save_labels(out / "labels.jsonl", dataio.labels_from_objects(scene.objects))
    occl = [[t, sorted(k for k, v in flags.items() if v)] for t, flags in zip(times, scene.occluded)]
    (out / "occlusion.json").write_text(json.dumps({"config": cfg, "occluded": occl}, sort_keys=True),
                                        encoding="utf-8")
    _echo_config(cfg, out)
    summary = {"frames": len(times), "objects": len({o.id for f in scene.objects for o in f}),
               "returns": sum(map(len, scene.measurements)), "boxes": sum(map(len, scene.boxes)),
               "occluded_fraction": scene.occluded_fraction()}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_estimate(cfg) -> list:
    out = _out_dir(cfg)
    name = cfg["estimator"]
    data = load_run_data(cfg)
    grids = out / "grids" / name
    grids.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, vis in enumerate(run_estimator(cfg, name, data)):
        path = grids / f"{k:05d}.vgrd"
        dataio.save_grid(path, GridSnapshot(vis.spec, np.clip(vis.values, 0, 1), vis.fov_mask, vis.t,
                                            {"estimator": name, "frame": k, "config": cfg}))
        paths.append(path)
    _echo_config(cfg, out)
    print(f"{name}: wrote {len(paths)} snapshots to {grids}")
    return paths


def _evaluate(cfg, name: str, data: RunData):
    return evaluate_outputs(cfg, name, data, run_estimator(cfg, name, data))


def cmd_evaluate(cfg) -> ReportFile:
    out = _out_dir(cfg)
    name = cfg["estimator"]
    rep = _evaluate(cfg, name, load_run_data(cfg))
    rf = ReportFile(rep, cfg)
    dataio.save_report(out / f"report_{name}.json", rf)
    _echo_config(cfg, out)
    print(format_table({name: rep}))
    return rf


def _fmt(v) -> str:
    return "   n/a" if v is None else f"{100 * v:5.1f}%"


def format_table(reports: dict) -> str:
    lines = [f"{'estimator':<10} {'TVR':>6} {'FVR':>6} {'FIR':>6} {'TV':>6} {'FV':>6} {'TI':>6} {'FI':>6}"]
    for name, r in reports.items():
        c = r.counts
        lines.append(f"{name:<10} {_fmt(r.tvr)} {_fmt(r.fvr)} {_fmt(r.fir)} {c.tv:6d} {c.fv:6d} {c.ti:6d} {c.fi:6d}")
    return "\n".join(lines)


def cmd_compare(cfg, names: Optional[Sequence[str]] = None) -> dict:
    out = _out_dir(cfg)
    names = list(names or ESTIMATORS)
    for n in names:
        if n not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {n!r}; choose from {ESTIMATORS}")
    data = load_run_data(cfg)
    reports = {n: _evaluate(cfg, n, data) for n in names}
    doc = {"config": cfg, "estimators": {n: {"counts": r.counts.as_dict(), "rates": r.rates.as_dict(),
                                             "coverage_rate": r.coverage_rate} for n, r in reports.items()}}
    (out / "compare.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _echo_config(cfg, out)
    print(format_table(reports))
    return reports


def cmd_sweep(cfg) -> dict:
    out = _out_dir(cfg)
    result = run_sweep(cfg, load_run_data(cfg))
    result["config"] = cfg
    (out / "sweep.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _echo_config(cfg, out)
    best = result["best"]
    print(f"best {result['objective']} = {best['objective']:.4f} at {best['params']}")
    return result


def render_image(snap: GridSnapshot, objects=(), points=(), scale: int = 4) -> np.ndarray:
    """RGB raster: x to the right, y upward; visibility blends blue (0) to red (1)."""
    spec: GridSpec2D = snap.spec
    v = np.clip(snap.values, 0, 1)[..., None]
    rgb = (1 - v) * np.array(INVISIBLE) + v * np.array(VISIBLE)
    rgb = np.where(snap.mask[..., None], rgb, np.array(UNKNOWN_RGB))
    img = np.repeat(np.repeat(rgb, scale, 0), scale, 1)  # (W*s, H*s, 3) indexed [x, y]
    res = spec.resolution / scale

    def put(x, y, color):
        i = np.floor((np.asarray(x) - spec.origin_x) / res).astype(int)
        j = np.floor((np.asarray(y) - spec.origin_y) / res).astype(int)
        ok = (i >= 0) & (i < img.shape[0]) & (j >= 0) & (j < img.shape[1])
        img[i[ok], j[ok]] = color

    for o in objects:
        corners = o.footprint().corners()
        for a, b in zip(corners, np.roll(corners, -1, axis=0)):
            s = np.linspace(0, 1, 8 * scale * int(np.ceil(np.hypot(*(b - a)) + 1)))
            put(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), OBJECT_RGB)
    for x, y in points:
        d = np.linspace(-0.3, 0.3, 5)
        xx, yy = np.meshgrid(x + d, y + d)
        put(xx.ravel(), yy.ravel(), MEASUREMENT_RGB)
    return np.transpose(img, (1, 0, 2))[::-1].astype(np.uint8)  # rows = y descending


def write_ppm(path, img: np.ndarray):
    h, w, _ = img.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, np.uint8).tobytes())


def cmd_render(cfg, snapshot: Path, scale: int = 4) -> Path:
    out = _out_dir(cfg)
    snap = dataio.load_grid(snapshot)
    if not isinstance(snap.spec, GridSpec2D):
        raise DataError(f"{snapshot}: only 2D Cartesian snapshots can be rendered")
    objects, points = [], []
    try:
        data = load_run_data(cfg)
    except DataError:
        data = None
    if data is not None:
        k = int(np.argmin(np.abs(np.asarray(data.times) - snap.t))) if data.times else None
        if k is not None and abs(data.times[k] - snap.t) < 1e-6:
            objects = data.objects[k]
            sensor = estimator_sensor(cfg, snap.meta.get("estimator", cfg["estimator"]))
            points = [m.xyz(sensor)[:2] for m in data.radar[k]]
    path = out / (snapshot.stem + ".ppm")
    write_ppm(path, render_image(snap, objects, points, scale))
    print(f"wrote {path}")
    return path


# --------------------------------------------------------------------------


def _provenance(exc: BaseException) -> str:
    mod = "visigrid"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("visigrid."):
            mod = name
    return mod


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"visigrid: usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "estimate":
            cmd_estimate(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "compare":
            names = args.estimator.split(",") if args.estimator else None
            cmd_compare(cfg, names)
        elif args.command == "sweep":
            cmd_sweep(cfg)
        elif args.command == "render":
            cmd_render(cfg, args.snapshot, args.scale)
    except (ConfigError, UsageError) as exc:
        print(f"visigrid: configuration error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"visigrid: data error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        print(f"visigrid: internal error [{_provenance(exc)}]: {exc!r}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
