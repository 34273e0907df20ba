"""Coplanarity-driven RGB-D trajectory registration.

Long-range constraints between coplanar planar patches - detected by a
descriptor over cropped patch views - are fed, together with optional
keypoint matches, to a robust alternating solver that jointly estimates
camera poses and per-constraint selection variables.  A fragment hierarchy
scales the solve to longer sequences, and a synthetic-scene harness provides
exact ground truth for evaluation.
"""

from .geometry import (
    CameraIntrinsics,
    Frame,
    Plane,
    PlanePatch,
    RigidTransform,
    coplanarity_distance,
    point_to_plane_distance,
    rms_closest_distance,
)
from .descriptors import (
    ColorHistogramDescriptor,
    FileDescriptorProvider,
    FocalLossParams,
    OraclePlaneDescriptor,
    Triplet,
    feature_distance,
    label_coplanar,
    pair_confidence,
    sample_triplets,
    triplet_focal_loss,
)
from .matching import (
    CoplanarPair,
    KeypointMatch,
    RansacParams,
    RansacResult,
    estimate_transform_from_triplet,
    load_keypoint_matches,
    propose_pairs,
    ransac_verify,
)
from .solver import (
    ObjectiveBreakdown,
    RegistrationProblem,
    SolveResult,
    SolverError,
    SolverOptions,
    StabilityReport,
    estimate_stability,
    objective_value,
    selection_closed_form,
    solve,
    solve_coplanarity_only,
    update_poses,
    update_selections,
)
from .extraction import (
    ExtractionParams,
    PatchInputBundle,
    build_patch_inputs,
    estimate_normals,
    segment_planar_patches,
)
from .pipeline import (
    Fragment,
    PipelineParams,
    PipelineResult,
    compose_trajectory,
    partition,
    register_sequence,
)
from .metrics import (
    CopBenchmarkSet,
    CopPair,
    ate_rmse,
    build_cop_set,
    pr_curve,
    robustness_sweep,
)
from .synthetic import (
    SceneSpec,
    SyntheticScene,
    generate_scene,
    make_keypoint_matches,
    make_proposals,
    problem_from_scene,
    render_frame,
)
from .fileio import DataError
from .config import ConfigError, RunConfig, apply_overrides, config_to_text, load_config, parse_config

__version__ = "0.1.0"
