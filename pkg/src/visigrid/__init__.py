"""Visibility grids for radar and camera sensors, and their evaluation against
ground-truth detection status."""
from ._accel import backend, set_backend, use_backend
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
    resample_polar_to_cartesian,
    slice_at_height,
    world_to_cell,
)
from .metrics import (
    AssociationTolerance,
    ConfusionCounts,
    MetricsReport,
    ObjectState,
    Outcome,
    classify,
    coverage_rate,
    detection_status,
    evaluate_run,
    rates,
)
from .sensors import (
    BoundingBox2D,
    BoundingBox3D,
    DecayConfig,
    Homography,
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
from .simulator import GroundTruthLog, RadarDetectionModel, SceneConfig, generate_scene, occlusion_oracle
from .visibility import (
    EstimatorPipeline,
    OccupancyThreshold,
    PipelineConfig,
    VisibilityGrid2D,
    object_visibility,
    raytrace_2d,
    raytrace_spherical,
    raytrace_voxels,
    run_camera3d,
    run_radar2d,
    run_radar3d,
    run_reference,
    squash_z_average,
)

__version__ = "0.1.0"
