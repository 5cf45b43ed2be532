"""Lidar bundle adjustment with closed-form plane and edge elimination."""
from .features import (
    DegenerateFeature,
    DegenerateSpectrum,
    FeatureGeometry,
    FeatureKind,
    PointCluster,
    cluster_from_points,
    eig_sym3,
    feature_cost,
    lambda_point_hessian,
    lambda_point_jacobian,
    merge_clusters,
    optimal_feature,
    pose_model,
)
from .geometry import Pose, boxplus, relative_pose_errors
from .metrics import DriftReport, evaluate_drift
from .pipeline import PipelineConfig, PipelineState, RegistrationResult, refine, register_scan, run
from .scan import LabeledScan
from .solver import BAProblem, CostItem, LMConfig, NoConstraints, SingularSystem, SolveReport, lm_step, optimize
from .voxel_map import VoxelMap, VoxelMapConfig

__version__ = "0.1.0"
