"""
Pose inference on SE(3).

The camera pose (world to camera) is a Gaussian over the right tangent space
of an anchor transform. Each update adds the information carried by the points
assigned to the map components, in closed form; ``iterate_pose`` re-linearizes
and re-anchors until the increment vanishes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import AngleNearPi, DimensionMismatch, Diverged, SingularInformation
from .frontend import PointBatch
from .infer import InferenceSettings, Responsibilities, compute_responsibilities
from .lie import RigidTransform, exp_se3, log_se3, pose_jacobians
from .splatmap import SplatMap

logger = logging.getLogger(__name__)


class TrackingDefaults:
    """Iteration budget and motion-model noise."""

    MAX_ITERS = 20
    TOL = 1e-5  # twist norm

    # Consecutive residual increases that count as divergence
    DIVERGENCE_PATIENCE = 3

    TRANSLATION_NOISE = 0.01  # m per frame
    ROTATION_NOISE = 0.02  # rad per frame


# =============================================================================
# POSE DISTRIBUTIONS
# =============================================================================


@dataclass(frozen=True)
class PosePosterior:
    """N(mu_xi, sigma_xi) over twists xi with T = anchor * exp(xi^)."""

    anchor: RigidTransform
    mu_xi: np.ndarray = field(default_factory=lambda: np.zeros(6))
    sigma_xi: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        mu = np.array(self.mu_xi, dtype=np.float64).reshape(-1)
        sigma = np.array(self.sigma_xi, dtype=np.float64)
        if mu.shape != (6,) or sigma.shape != (6, 6):
            raise DimensionMismatch(f"pose posterior needs a 6-vector and a 6x6 covariance, got {mu.shape} and {sigma.shape}")
        object.__setattr__(self, "mu_xi", mu)
        object.__setattr__(self, "sigma_xi", sigma)

    @classmethod
    def at(cls, T: RigidTransform, sigma: Optional[np.ndarray] = None) -> "PosePosterior":
        return cls(T, np.zeros(6), np.zeros((6, 6)) if sigma is None else sigma)

    def fold(self) -> RigidTransform:
        return fold(self)

    def reanchor(self) -> "PosePosterior":
        """Move the anchor to the mean; the folded estimate is unchanged."""
        if not np.any(self.mu_xi):
            return self
        return PosePosterior(self.fold(), np.zeros(6), self.sigma_xi)

    def information(self) -> np.ndarray:
        """Inverse covariance; raises SingularInformation for a singular covariance."""
        return _spd_inverse(self.sigma_xi)


def fold(pose: PosePosterior) -> RigidTransform:
    """The point estimate anchor * exp(mu_xi^)."""
    if not np.any(pose.mu_xi):
        return pose.anchor
    return pose.anchor @ exp_se3(pose.mu_xi)


def _spd_inverse(A: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(A)
    except (LinAlgError, ValueError) as exc:
        raise SingularInformation(f"matrix is not positive definite: {exc}") from None
    inverse = cho_solve(factor, np.eye(A.shape[0]))
    return 0.5 * (inverse + inverse.T)


@dataclass(frozen=True)
class MotionPrior:
    predicted: RigidTransform
    process_noise: np.ndarray


def process_noise(translation_sigma: float = TrackingDefaults.TRANSLATION_NOISE, rotation_sigma: float = TrackingDefaults.ROTATION_NOISE) -> np.ndarray:
    return np.diag([translation_sigma**2] * 3 + [rotation_sigma**2] * 3)


def constant_velocity_prior(previous: RigidTransform, before_previous: Optional[RigidTransform], noise: np.ndarray) -> MotionPrior:
    """Repeat the last inter-frame motion; with a single pose, predict no motion."""
    if before_previous is None:
        return MotionPrior(previous, noise)
    delta = previous @ before_previous.inverse()
    return MotionPrior(delta @ previous, noise)


def static_prior(previous: RigidTransform, noise: np.ndarray) -> MotionPrior:
    return MotionPrior(previous, noise)


def odometry_prior(previous: RigidTransform, relative_motion: RigidTransform, noise: np.ndarray) -> MotionPrior:
    """Prior from an external relative-motion measurement T_t T_{t-1}^-1."""
    return MotionPrior(relative_motion @ previous, noise)


def predict(prev: PosePosterior, prior: MotionPrior) -> PosePosterior:
    """Anchor at the predicted pose and widen the covariance by the process noise."""
    return PosePosterior(prior.predicted, np.zeros(6), prev.sigma_xi + prior.process_noise)


# =============================================================================
# CLOSED-FORM UPDATE
# =============================================================================


@dataclass
class LinearizedObservations:
    """Information increment, its right-hand side and the Mahalanobis residual at the anchor."""

    information: np.ndarray  # (6, 6)
    rhs: np.ndarray  # (6,)
    residual_sum: float
    weight: float

    @property
    def residual_rms(self) -> float:
        return float(np.sqrt(self.residual_sum / self.weight)) if self.weight > 0 else 0.0


def linearize(points: PointBatch, gamma: Responsibilities, splat_map: SplatMap, anchor: RigidTransform) -> LinearizedObservations:
    """Sum gamma G^T S^-1 G and gamma G^T S^-1 (s - T_bar mu) over all assigned pairs.

    S is the component's expected covariance rotated into the camera frame and
    G the Jacobian of the transformed component mean.
    """
    if gamma.num_points != len(points):
        raise DimensionMismatch(f"{len(points)} points but responsibilities for {gamma.num_points}")
    valid = (gamma.indices >= 0) & (gamma.weights > 0)
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return LinearizedObservations(np.zeros((6, 6)), np.zeros(6), 0.0, 0.0)

    k = gamma.indices[rows, cols]
    w = gamma.weights[rows, cols]
    used, local = np.unique(k, return_inverse=True)
    local = local.reshape(-1)

    R = anchor.R
    means = splat_map.means[used]
    cov_cam = np.einsum("ij,kjl,ml->kim", R, splat_map.posterior.spatial.expected_covariance()[used], R)
    precision = np.linalg.inv(cov_cam)
    G = pose_jacobians(anchor, means)
    GtP = np.einsum("kai,kab->kib", G, precision)

    n_k = np.bincount(local, weights=w, minlength=used.shape[0])
    information = np.einsum("k,kib,kbj->ij", n_k, GtP, G)
    information = 0.5 * (information + information.T)

    residual = points.positions[rows] - (means @ R.T + anchor.t)[local]
    rhs = np.einsum("p,pib,pb->i", w, GtP[local], residual)
    residual_sum = float(np.einsum("p,pa,pab,pb->", w, residual, precision[local], residual))
    return LinearizedObservations(information, rhs, residual_sum, float(w.sum()))


def pose_information_update(points: PointBatch, gamma: Responsibilities, splat_map: SplatMap, pose: PosePosterior) -> PosePosterior:
    """Information-form update about the anchor.

    Sigma'^-1 = sum gamma G^T S^-1 G + Sigma^-1 and
    mu' = Sigma' (sum gamma G^T S^-1 (s - T_bar mu_k) + Sigma^-1 mu).
    A singular prior or posterior covariance returns ``pose`` unchanged.
    """
    if len(points) == 0 or gamma.total_weight() == 0:
        return pose
    observations = linearize(points, gamma, splat_map, pose.anchor)
    return _apply(pose, observations)


def _apply(pose: PosePosterior, observations: LinearizedObservations) -> PosePosterior:
    try:
        prior_information = pose.information()
        information = observations.information + prior_information
        sigma = _spd_inverse(information)
    except SingularInformation as exc:
        logger.debug("pose update skipped: %s", exc)
        return pose
    mu = sigma @ (observations.rhs + prior_information @ pose.mu_xi)
    return PosePosterior(pose.anchor, mu, sigma)


# =============================================================================
# ITERATIVE RE-LINEARIZATION
# =============================================================================


@dataclass
class TrackingReport:
    """Outcome of tracking one frame."""

    posterior: PosePosterior
    iterations: int = 0
    converged: bool = False
    residuals: List[float] = field(default_factory=list)
    min_information_eigenvalue: float = 0.0
    gamma: Optional[Responsibilities] = None
    issues: List[str] = field(default_factory=list)


def track_frame(
    points: PointBatch,
    splat_map: SplatMap,
    pose: PosePosterior,
    max_iters: int = TrackingDefaults.MAX_ITERS,
    tol: float = TrackingDefaults.TOL,
    settings: InferenceSettings = InferenceSettings(),
    patience: int = TrackingDefaults.DIVERGENCE_PATIENCE,
) -> TrackingReport:
    """Alternate responsibilities and pose updates, re-anchoring after each update.

    ``pose`` is the prior (typically a prediction). At every iteration the prior
    mean is re-expressed in the tangent space of the current anchor so that
    repeated updates do not count the prior twice.
    """
    if max_iters < 1:
        raise ValueError(f"max_iters must be at least 1, got {max_iters}")

    target = pose.fold()
    current = pose.reanchor()
    report = TrackingReport(posterior=current, min_information_eigenvalue=np.inf)
    if len(points) == 0 or splat_map.size == 0:
        report.issues.append("no points to track against")
        report.min_information_eigenvalue = 0.0
        return report

    increases = 0
    for iteration in range(1, max_iters + 1):
        gamma = compute_responsibilities(points, splat_map, current, settings.gate_radius, settings.top_m, settings.propagate_pose_uncertainty)
        observations = linearize(points, gamma, splat_map, current.anchor)
        report.gamma = gamma
        report.iterations = iteration
        if observations.weight == 0:
            report.issues.append("no point fell inside the gate of any component")
            break

        residual = observations.residual_rms
        if report.residuals and residual > report.residuals[-1]:
            increases += 1
        else:
            increases = 0
        report.residuals.append(residual)
        if increases >= patience:
            raise Diverged(report.residuals)

        report.min_information_eigenvalue = min(report.min_information_eigenvalue, float(np.linalg.eigvalsh(observations.information)[0]))

        try:
            prior_mean = log_se3(current.anchor.inverse() @ target)
        except AngleNearPi:
            raise Diverged(report.residuals) from None
        updated = _apply(PosePosterior(current.anchor, prior_mean, pose.sigma_xi), observations)
        step = float(np.linalg.norm(updated.mu_xi))
        current = updated.reanchor()
        logger.debug("iteration %d: residual %.4g, step %.3e", iteration, residual, step)
        if step < tol:
            report.converged = True
            break

    report.posterior = current
    if not np.isfinite(report.min_information_eigenvalue):
        report.min_information_eigenvalue = 0.0
    return report


def iterate_pose(
    points: PointBatch,
    splat_map: SplatMap,
    pose: PosePosterior,
    max_iters: int = TrackingDefaults.MAX_ITERS,
    tol: float = TrackingDefaults.TOL,
    settings: InferenceSettings = InferenceSettings(),
) -> PosePosterior:
    """Refined pose posterior; raises Diverged when the residual keeps growing."""
    return track_frame(points, splat_map, pose, max_iters, tol, settings).posterior
