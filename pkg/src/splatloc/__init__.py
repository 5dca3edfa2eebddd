"""Sparse-to-dense visual localization against compact Gaussian feature fields.

The package splits into a functional core and a thin estimator facade:

- field / maps: the Gaussian feature field and feature/depth map containers
  plus their binary file formats.
- rendering: a tile-based software rasterizer producing feature, depth, and
  alpha images, with analytic feature gradients for map refinement.
- matching: sparse keypoint-to-landmark and coarse-to-fine dense matching.
- condensing: k-means condensation of dense matches into cluster proxies.
- solving: P3P + RANSAC pose estimation and robust iterative refinement.
- pipeline: map building, the two-stage localize loop, and the
  SparseToDenseLocalizer estimator.
- bench: the synthetic localization benchmark and condensing ablation.
- cli: `splatloc` command-line entry points for all of the above.
"""

from .bench import (
    AblationReport,
    QueryRecord,
    RunReport,
    ablate,
    run_benchmark,
    sample_query_poses,
    write_ablation_csv,
    write_report_csv,
)
from .condensing import (
    ClusterResult,
    CondensedMatches,
    condense,
    embed4d,
    kmeans,
    lift_to_3d,
    select_proxies,
)
from .config import (
    PipelineConfig,
    format_config,
    load_config,
    make_config,
    parse_config,
    replace_config,
    save_config,
)
from .errors import (
    ConfigError,
    EmptyViewError,
    FieldFormatError,
    InsufficientMatchesError,
    LocalizationError,
    PoseEstimationError,
    SplatlocError,
)
from .field import (
    GaussianField,
    Layout,
    StorageReport,
    bytes_per_primitive,
    field_from_bytes,
    field_to_bytes,
    load_field,
    report_for_counts,
    save_field,
    storage_report,
)
from .fitting import (
    FitOptions,
    FitResult,
    LandmarkSet,
    TrainView,
    fit_features,
    sample_landmarks,
)
from .geometry import (
    Camera,
    Pose,
    backproject,
    look_at_pose,
    pose_error,
    project,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from .maps import (
    DepthMap,
    FeatureMap,
    load_depth_map,
    load_feature_map,
    save_depth_map,
    save_feature_map,
)
from .matching import (
    DenseMatches,
    DetectOptions,
    Keypoint,
    SparseMatches,
    detect_keypoints,
    match_dense_coarse,
    match_sparse,
    pool_coarse,
    refine_matches,
)
from .pipeline import (
    LocResult,
    MapBundle,
    SparseToDenseLocalizer,
    build_map,
    bundle_from_bytes,
    bundle_to_bytes,
    load_bundle,
    localize,
    save_bundle,
)
from .rendering import (
    RenderOptions,
    RenderOutput,
    render,
    render_with_feature_gradients,
)
from .solving import (
    Correspondences,
    PnPResult,
    RansacOptions,
    RefineResult,
    RobustKernel,
    p3p,
    ransac_pnp,
    refine_robust,
)
from .synthetic import SyntheticSceneSpec, gen_query, gen_synthetic_scene

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "Camera",
    "ClusterResult",
    "CondensedMatches",
    "ConfigError",
    "Correspondences",
    "DenseMatches",
    "DepthMap",
    "DetectOptions",
    "EmptyViewError",
    "FeatureMap",
    "FieldFormatError",
    "FitOptions",
    "FitResult",
    "GaussianField",
    "InsufficientMatchesError",
    "Keypoint",
    "LandmarkSet",
    "Layout",
    "LocResult",
    "LocalizationError",
    "MapBundle",
    "PipelineConfig",
    "PnPResult",
    "Pose",
    "PoseEstimationError",
    "QueryRecord",
    "RansacOptions",
    "RefineResult",
    "RenderOptions",
    "RenderOutput",
    "RobustKernel",
    "RunReport",
    "SparseMatches",
    "SparseToDenseLocalizer",
    "SplatlocError",
    "StorageReport",
    "SyntheticSceneSpec",
    "TrainView",
    "ablate",
    "backproject",
    "build_map",
    "bundle_from_bytes",
    "bundle_to_bytes",
    "bytes_per_primitive",
    "condense",
    "detect_keypoints",
    "embed4d",
    "field_from_bytes",
    "field_to_bytes",
    "fit_features",
    "format_config",
    "gen_query",
    "gen_synthetic_scene",
    "kmeans",
    "lift_to_3d",
    "load_bundle",
    "load_config",
    "load_depth_map",
    "load_feature_map",
    "load_field",
    "localize",
    "look_at_pose",
    "make_config",
    "match_dense_coarse",
    "match_sparse",
    "p3p",
    "parse_config",
    "pool_coarse",
    "pose_error",
    "project",
    "ransac_pnp",
    "refine_matches",
    "refine_robust",
    "replace_config",
    "report_for_counts",
    "run_benchmark",
    "sample_landmarks",
    "sample_query_poses",
    "save_bundle",
    "save_config",
    "save_depth_map",
    "save_feature_map",
    "save_field",
    "se3_exp",
    "se3_log",
    "select_proxies",
    "so3_exp",
    "so3_log",
    "storage_report",
    "write_ablation_csv",
    "write_report_csv",
]
