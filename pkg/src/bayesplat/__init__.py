"""Probabilistic dense RGB-D SLAM over a map of Bayesian Gaussian splats."""

from .config import RunConfig, load_config
from .errors import BayesplatError
from .evaluation import Trajectory, ate_rmse, read_tum_trajectory, write_tum_trajectory
from .frontend import CameraIntrinsics, FrameObservation, PointBatch, backproject, voxel_downsample
from .infer import InferenceSettings, compute_responsibilities, run_cavi
from .lie import RigidTransform, exp_se3, log_se3
from .pipeline import run_slam, write_artifacts
from .render import rasterize
from .sim import make_scene
from .splatmap import SplatMap, init_from_points
from .track import PosePosterior, track_frame

__all__ = [
    "BayesplatError",
    "CameraIntrinsics",
    "FrameObservation",
    "InferenceSettings",
    "PointBatch",
    "PosePosterior",
    "RigidTransform",
    "RunConfig",
    "SplatMap",
    "Trajectory",
    "ate_rmse",
    "backproject",
    "compute_responsibilities",
    "exp_se3",
    "init_from_points",
    "load_config",
    "log_se3",
    "make_scene",
    "rasterize",
    "read_tum_trajectory",
    "run_cavi",
    "run_slam",
    "track_frame",
    "voxel_downsample",
    "write_artifacts",
    "write_tum_trajectory",
]
