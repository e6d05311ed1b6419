"""Run configuration and the orchestration behind the CLI commands."""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .geometry import FovSpec, GridSpec2D, SensorPose, VoxelGridSpec
from .metrics import AssociationTolerance, MetricsReport, evaluate_run
from .sensors import DecayConfig, IsmConfig, PinholeCamera, RadarFilterConfig
from .simulator import DEFAULT_EXTENTS, RadarDetectionModel, SceneConfig, VehicleSpec
from .visibility import ESTIMATORS, EstimatorPipeline, PipelineConfig, default_spherical_spec

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "estimator": "radar3d",
    "out": "out",
    "sensor": {
        "x": 0.0, "y": -5.25, "z": 6.0, "yaw_deg": 0.0, "pitch_deg": 0.0,
        "max_range": 150.0, "azimuth_half_angle_deg": 20.0,
        "elevation_min_deg": -15.0, "elevation_max_deg": 5.0,
    },
    "scene": {
        "lanes_per_direction": 3, "lane_width": 3.5, "duration": 60.0, "frame_rate": 10.0,
        "n_vehicles": 41, "truck_ratio": 0.2, "truck_right_lane_prob": 0.8,
        "speed_range": [22.0, 36.0], "min_gap": 8.0, "road_x": [-10.0, 170.0],
        "camera_max_distance": 100.0, "vehicles": None,
    },
    "radar_model": {
        "p_detect_visible": 1.0, "extra_returns_mean": 0.0, "position_sigma": 0.0,
        "doppler_sigma": 0.0, "deterministic": True, "clutter_rate": 0.0,
    },
    "grid": {"origin_x": 0.0, "origin_y": -16.0, "width": 160, "height": 32, "resolution": 1.0},
    "spherical": {"dr": 0.5, "azimuth_res_deg": 0.25, "elevation_res_deg": 0.25},
    "voxel": {"z_min": 0.0, "z_max": 5.0, "n_z": 10},
    "camera": {"fx": 1200.0, "fy": 1200.0, "cx": 960.0, "cy": 540.0, "width": 1920, "height": 1080},
    "size_prior": {"car": [4.5, 1.8, 1.5], "truck": [16.0, 2.5, 4.0]},
    "filter": {"min_quality": 0.0, "min_abs_doppler": 0.0},
    "evaluation": {"position_radius": 1.0, "doppler_tolerance": 1.0, "vis_threshold": 0.5},
    "estimators": {
        "radar2d": {"threshold": 0.6, "decay_rate": 0.5, "peak_occupancy": 0.9, "sigma": 0.6,
                    "free_space_decrement": 0.1},
        "radar3d": {"threshold": 0.6, "decay_rate": 0.5, "peak_occupancy": 0.9, "sigma_range": 0.5,
                    "sigma_azimuth_deg": 0.5, "sigma_elevation_deg": 0.5, "free_space_decrement": 0.1,
                    "slice_height": 1.0, "graded": False},
        "camera3d": {"threshold": 0.6, "decay_rate": 0.001, "occupied_value": 0.9, "squash_band": [0.0, 4.0],
                     "vis_threshold": 0.7, "position_radius": 2.0, "max_range": 100.0},
        "reference": {"threshold": 0.6, "margin": 0.0, "variant": "spherical", "slice_height": 1.0},
    },
    "inputs": {"measurements": None, "boxes": None, "labels": None},
    "sweep": {"estimator": None, "params": {}, "objective": "fvr+fir", "weights": [1.0, 1.0],
              "budget": 10, "mode": "grid"},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> dict:
    user = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = deep_merge(DEFAULT_CONFIG, user)
    return deep_merge(cfg, overrides or {})


def get_path(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"no config key {dotted!r}")
        node = node[part]
    return node


def set_path(cfg: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(cfg)
    parts = dotted.split(".")
    node = out
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"no config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"no config key {dotted!r}")
    node[parts[-1]] = value
    return out


# --------------------------------------------------------------------------
# builders


def sensor_pose(cfg: dict, name: Optional[str] = None) -> SensorPose:
    """The configured sensor; an estimator section may narrow ``max_range``."""
    s = cfg["sensor"]
    max_range = s["max_range"]
    if name is not None:
        max_range = cfg["estimators"][name].get("max_range") or max_range
    fov = FovSpec(max_range, math.radians(s["azimuth_half_angle_deg"]),
                  math.radians(s["elevation_min_deg"]), math.radians(s["elevation_max_deg"]))
    return SensorPose(s["x"], s["y"], s["z"], math.radians(s["yaw_deg"]), math.radians(s["pitch_deg"]), fov)


def scene_config(cfg: dict) -> SceneConfig:
    sc = dict(cfg["scene"])
    vehicles = sc.pop("vehicles", None)
    if vehicles is not None:
        vehicles = tuple(VehicleSpec(**v) for v in vehicles)
    return SceneConfig(
        speed_range=tuple(sc.pop("speed_range")), road_x=tuple(sc.pop("road_x")),
        sensor=sensor_pose(cfg), seed=int(cfg["seed"]), radar=RadarDetectionModel(**cfg["radar_model"]),
        vehicles=vehicles, extents=dict(DEFAULT_EXTENTS), **sc)


def grid_spec(cfg: dict) -> GridSpec2D:
    return GridSpec2D(**cfg["grid"])


def camera_model(cfg: dict, sensor: SensorPose) -> PinholeCamera:
    c = cfg["camera"]
    return PinholeCamera(sensor, c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])


def pipeline_config(cfg: dict, name: str) -> PipelineConfig:
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    e = cfg["estimators"][name]
    sensor = sensor_pose(cfg, name)
    grid = grid_spec(cfg)
    pc = PipelineConfig(grid=grid, threshold=e["threshold"],
                        radar_filter=RadarFilterConfig(cfg["filter"]["min_quality"],
                                                       min_abs_doppler=cfg["filter"]["min_abs_doppler"]),
                        size_prior={k: tuple(v) for k, v in cfg["size_prior"].items()})
    if "decay_rate" in e:
        pc.decay = DecayConfig(e["decay_rate"])
    if name in ("radar3d", "reference"):
        sp = cfg["spherical"]
        pc.spherical = default_spherical_spec(sensor, sp["dr"], sp["azimuth_res_deg"], sp["elevation_res_deg"])
        pc.slice_height = e.get("slice_height", 1.0)
    if name == "radar2d":
        s2 = e["sigma"] ** 2
        pc.ism = IsmConfig(e["peak_occupancy"], ((s2, 0.0), (0.0, s2)),
                           free_space_decrement=e["free_space_decrement"])
    elif name == "radar3d":
        pc.ism_spherical = IsmConfig(
            e["peak_occupancy"],
            sigmas=(e["sigma_range"], math.radians(e["sigma_azimuth_deg"]), math.radians(e["sigma_elevation_deg"])),
            free_space_decrement=e["free_space_decrement"])
        pc.graded = bool(e.get("graded", False))
    elif name == "camera3d":
        v = cfg["voxel"]
        pc.voxel = VoxelGridSpec(grid, v["z_min"], v["z_max"], v["n_z"])
        pc.camera = camera_model(cfg, sensor)
        pc.occupied_value = e["occupied_value"]
        pc.squash_band = tuple(e["squash_band"])
    else:
        pc.reference_margin = e["margin"]
        pc.reference_variant = e["variant"]
    return pc


def estimator_sensor(cfg: dict, name: str) -> SensorPose:
    """Sensor pose as seen by one estimator; the camera's FoV is its image
    frustum out to the estimator's range."""
    sensor = sensor_pose(cfg, name)
    if name != "camera3d":
        return sensor
    fov = camera_model(cfg, sensor).fov(sensor.fov.max_range)
    return SensorPose(sensor.x, sensor.y, sensor.z, sensor.yaw, sensor.pitch, fov)


def make_pipeline(cfg: dict, name: str) -> EstimatorPipeline:
    return EstimatorPipeline(name, estimator_sensor(cfg, name), pipeline_config(cfg, name))


def tolerance(cfg: dict, name: str) -> AssociationTolerance:
    ev = cfg["evaluation"]
    if name == "camera3d":
        e = cfg["estimators"]["camera3d"]
        return AssociationTolerance(e.get("position_radius", ev["position_radius"]), ev["doppler_tolerance"], "camera")
    return AssociationTolerance(ev["position_radius"], ev["doppler_tolerance"], "radar")


def vis_threshold(cfg: dict, name: str) -> float:
    return cfg["estimators"][name].get("vis_threshold", cfg["evaluation"]["vis_threshold"])


# --------------------------------------------------------------------------
# runs


@dataclass
class RunData:
    """Aligned per-frame inputs for estimation and evaluation."""

    times: list
    objects: list
    radar: list
    boxes: list = field(default_factory=list)

    def frame_inputs(self, name: str) -> list:
        if name == "reference":
            return self.objects
        if name == "camera3d":
            return self.boxes
        return self.radar


def run_data_from_log(log) -> RunData:
    return RunData([float(t) for t in log.times], log.objects, log.measurements, log.boxes)


def run_estimator(cfg: dict, name: str, data: RunData) -> list:
    pipe = make_pipeline(cfg, name)
    frames = data.frame_inputs(name)
    if len(frames) != len(data.times):
        raise ValueError(f"{name}: {len(frames)} input frames for {len(data.times)} timestamps")
    outs = []
    prev = None
    for t, frame in zip(data.times, frames):
        dt = 0.0 if prev is None else t - prev
        outs.append(pipe.step(frame, dt, t))
        prev = t
    if pipe.warnings:
        log.warning("%s: %s", name, pipe.warnings)
    return outs


def evaluate_outputs(cfg: dict, name: str, data: RunData, outputs: Sequence) -> MetricsReport:
    sensor = estimator_sensor(cfg, name)
    if name == "camera3d":
        frames = data.boxes
        hom = camera_model(cfg, sensor).ground_homography()
    else:
        frames, hom = data.radar, None
    return evaluate_run(outputs, data.objects, frames, tolerance(cfg, name), vis_threshold(cfg, name), sensor, hom)


def evaluate_estimator(cfg: dict, name: str, data: RunData) -> MetricsReport:
    return evaluate_outputs(cfg, name, data, run_estimator(cfg, name, data))


# --------------------------------------------------------------------------
# sweep

OBJECTIVES = ("fvr", "fir", "fvr+fir", "weighted")


def objective_value(report: MetricsReport, objective: str, weights=(1.0, 1.0)) -> float:
    """Lower is better; undefined rates count as the worst value 1."""
    fvr = 1.0 if report.fvr is None else report.fvr
    fir = 1.0 if report.fir is None else report.fir
    if objective == "fvr":
        return fvr
    if objective == "fir":
        return fir
    if objective == "fvr+fir":
        return fvr + fir
    if objective == "weighted":
        return weights[0] * fvr + weights[1] * fir
    raise ConfigError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")


def sweep_candidates(spec: dict, rng: Optional[np.random.Generator] = None) -> list[dict]:
    params = spec.get("params") or {}
    if not params:
        raise ConfigError("sweep needs at least one parameter")
    budget = int(spec.get("budget", 1))
    if budget < 1:
        raise ConfigError("sweep budget must be at least 1")
    names = list(params)
    for n in names:
        if not isinstance(params[n], list) or not params[n]:
            raise ConfigError(f"sweep parameter {n!r} needs a non-empty list of values")
    grid = [dict(zip(names, vals)) for vals in itertools.product(*(params[n] for n in names))]
    if spec.get("mode", "grid") == "random":
        rng = rng or np.random.default_rng(0)
        idx = rng.permutation(len(grid))[:budget]
        return [grid[i] for i in sorted(idx)]
    return grid[:budget]


def run_sweep(cfg: dict, data: RunData) -> dict:
    spec = cfg["sweep"]
    name = spec.get("estimator") or cfg["estimator"]
    objective = spec.get("objective", "fvr+fir")
    trace = []
    for cand in sweep_candidates(spec, np.random.default_rng(cfg["seed"])):
        trial = cfg
        for k, v in cand.items():
            trial = set_path(trial, k, v)
        rep = evaluate_estimator(trial, name, data)
        trace.append({"params": cand, "objective": objective_value(rep, objective, spec.get("weights", (1, 1))),
                      "counts": rep.counts.as_dict(), "rates": rep.rates.as_dict()})
    best = min(range(len(trace)), key=lambda i: trace[i]["objective"])
    return {"estimator": name, "objective": objective, "best": trace[best], "trace": trace}
