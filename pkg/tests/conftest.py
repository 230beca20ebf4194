"""Shared fixtures: small seeded maps, frames and poses."""

import sys

import numpy as np
import pytest

sys.path.append("src")

from bayesplat.frontend import CameraIntrinsics, PointBatch
from bayesplat.lie import RigidTransform, exp_se3
from bayesplat.splatmap import MixtureParams, NiwPosterior, SplatMap


def random_transform(rng: np.random.Generator, translation: float = 1.0, angle: float = 1.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_se3(np.concatenate([rng.uniform(-translation, translation, 3), axis * rng.uniform(0.0, angle)]))


def make_map(means: np.ndarray, variance: float = 1e-3, kappa: float = 1e6, nu: float = 1e6, colors: np.ndarray = None, alpha: float = 1.0) -> SplatMap:
    """Map with a sharp (near point-mass) NIW posterior at each mean, isotropic expected covariance ``variance``."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    K = means.shape[0]
    colors = np.full((K, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64)
    spatial = NiwPosterior.broadcast(means, kappa, variance * (nu - 4.0) * np.eye(3), nu)
    color = NiwPosterior.broadcast(colors, kappa, 1e-3 * (nu - 4.0) * np.eye(3), nu)
    return SplatMap.from_params(MixtureParams(spatial, color, np.full(K, alpha)), alpha_prior=alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=40.0, fy=40.0, cx=19.5, cy=14.5, width=40, height=30, depth_scale=1000.0)


@pytest.fixture
def cluster_batch(rng):
    """Three tight clusters of 40 points each."""
    centers = np.array([[0.0, 0.0, 1.0], [0.3, 0.0, 1.2], [0.0, 0.3, 0.9]])
    positions = np.concatenate([c + 0.01 * rng.normal(size=(40, 3)) for c in centers])
    colors = np.clip(np.concatenate([np.full((40, 3), v) for v in (0.2, 0.5, 0.8)]) + 0.01 * rng.normal(size=(120, 3)), 0, 1)
    return centers, PointBatch.from_arrays(positions, colors)
