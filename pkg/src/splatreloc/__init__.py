"""Monocular camera relocalization against 3D Gaussian splat maps."""

from .anchors import (
    AnchorDatabase,
    AnchorRecord,
    build_anchor_db,
    global_descriptor,
    load_anchor_db,
    retrieve,
    save_anchor_db,
)
from .errors import (
    CheiralityViolation,
    DegenerateGeometry,
    ImageFormatError,
    InsufficientMatches,
    MatchFileError,
    NoConsensus,
    PoseFileError,
    SplatFormatError,
    SplatRelocError,
    TrajectoryTooShort,
)
from .evaluation import (
    AteStats,
    TimingReport,
    ate_statistics,
    error_histogram,
    pose_errors,
    recall_at,
    timing_report,
    write_ate_csv,
)
from .features import (
    DetectorConfig,
    FeatureMatch,
    Keypoint,
    MatcherConfig,
    MatchStats,
    OracleConfig,
    detect_and_describe,
    load_matches,
    match_features,
    match_stats,
    oracle_match,
    save_matches,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Trajectory,
    load_trajectory,
    look_at,
    pose_delta,
    save_trajectory,
)
from .pnp import (
    BundleAdjustConfig,
    ControlPointSet,
    Correspondence,
    RansacConfig,
    SolverReport,
    apply_delta,
    compute_control_points,
    epnp,
    refine_ba,
    reprojection_residuals,
    solve_pnp,
    umeyama_align,
)
from .relocalize import (
    ExternalMatcher,
    IterationTrace,
    MatchOutcome,
    OracleMatcher,
    ReferenceMatcher,
    RelocalizationResult,
    RelocalizeConfig,
    lift_to_3d,
    relocalize,
    save_result,
    save_result_timings,
)
from .renderer import (
    ProjectedGaussian,
    RenderOutput,
    load_depth,
    load_ppm,
    project_gaussian,
    render,
    save_depth,
    save_ppm,
)
from .scene import (
    DEFAULT_CAMERA,
    Gaussian3D,
    SplatScene,
    SyntheticSceneConfig,
    generate_synthetic_scene,
    load_splat_scene,
    save_splat_scene,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorDatabase",
    "AnchorRecord",
    "AteStats",
    "BundleAdjustConfig",
    "CameraIntrinsics",
    "CheiralityViolation",
    "ControlPointSet",
    "Correspondence",
    "DEFAULT_CAMERA",
    "DegenerateGeometry",
    "DetectorConfig",
    "ExternalMatcher",
    "FeatureMatch",
    "Gaussian3D",
    "ImageFormatError",
    "InsufficientMatches",
    "IterationTrace",
    "Keypoint",
    "MatchFileError",
    "MatchOutcome",
    "MatchStats",
    "MatcherConfig",
    "NoConsensus",
    "OracleConfig",
    "OracleMatcher",
    "Pose",
    "PoseFileError",
    "ProjectedGaussian",
    "RansacConfig",
    "ReferenceMatcher",
    "RelocalizationResult",
    "RelocalizeConfig",
    "RenderOutput",
    "SolverReport",
    "SplatFormatError",
    "SplatRelocError",
    "SplatScene",
    "SyntheticSceneConfig",
    "TimingReport",
    "Trajectory",
    "TrajectoryTooShort",
    "apply_delta",
    "ate_statistics",
    "build_anchor_db",
    "compute_control_points",
    "detect_and_describe",
    "epnp",
    "error_histogram",
    "generate_synthetic_scene",
    "global_descriptor",
    "lift_to_3d",
    "load_anchor_db",
    "load_depth",
    "load_matches",
    "load_ppm",
    "load_splat_scene",
    "load_trajectory",
    "look_at",
    "match_features",
    "match_stats",
    "oracle_match",
    "pose_delta",
    "pose_errors",
    "project_gaussian",
    "recall_at",
    "refine_ba",
    "relocalize",
    "render",
    "reprojection_residuals",
    "retrieve",
    "save_anchor_db",
    "save_depth",
    "save_matches",
    "save_ppm",
    "save_result",
    "save_result_timings",
    "save_splat_scene",
    "save_trajectory",
    "solve_pnp",
    "timing_report",
    "umeyama_align",
    "write_ate_csv",
]
