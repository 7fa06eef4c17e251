"""Multi-view 3D pose estimation for crowded scenes.

People are associated across calibrated views by matching their feet on the
ground plane, then reconstructed per person by a MAP fit that combines
uncertainty-weighted reprojection error with a bone-length prior.
"""

from .detections import Detection2D, SigmaModel, sigma_model
from .geometry import CameraView, SkeletonSchema, project, project_points, solve_homogeneous_ls
from .homography import (
    GROUND_FRAME,
    GroundHomography,
    compose_check,
    estimate_homography,
    ground_homography_from_cameras,
    rectify,
)
from .lap import Assignment, solve_lap
from .matching import (
    FootPair,
    MatchingConfig,
    PersonTrack,
    PersonTrackSet,
    edge_cost,
    extract_foot_pairs,
    match_pair,
    match_views,
    merge_multiview,
)
from .metrics import EvalReport, matching_precision, mpjpe, oks_ap_ar, pcp, reproj_stats
from .reconstruct import (
    Pose3D,
    SolverConfig,
    neg_log_posterior,
    reconstruct_scene,
    solve_person,
    triangulate_dlt,
)
from .synth import GroundTruth, SceneSpec, generate

__version__ = "0.1.0"
