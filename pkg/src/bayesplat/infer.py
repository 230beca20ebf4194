"""
Coordinate-ascent variational inference over the splat map.

The E-step computes soft assignments of points to components from the expected
log-likelihoods under the current posterior; the M-step turns one pass of
sufficient statistics into closed-form NIW and Dirichlet updates. The ELBO is
evaluated after every step so callers can certify convergence.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .frontend import PointBatch
from .lie import act, inverse_action_jacobians
from .splatmap import LOG_2PI, MixtureParams, MixtureStats, SplatMap, accumulate_color_stats, accumulate_spatial_stats

if TYPE_CHECKING:
    from .track import PosePosterior

logger = logging.getLogger(__name__)


class InferenceDefaults:
    """Gating and iteration budget for the E/M loop."""

    GATE_RADIUS = 0.5  # m
    TOP_M = 8
    CAVI_SWEEPS = 3

    # Early exit once the ELBO improves by less than this fraction of its magnitude
    RELATIVE_TOL = 1e-4

    PROPAGATE_POSE_UNCERTAINTY = True


@dataclass(frozen=True)
class InferenceSettings:
    """``gate_radius=None`` evaluates every component for every point."""

    gate_radius: Optional[float] = InferenceDefaults.GATE_RADIUS
    top_m: Optional[int] = InferenceDefaults.TOP_M
    propagate_pose_uncertainty: bool = InferenceDefaults.PROPAGATE_POSE_UNCERTAINTY
    eigen_floor: Optional[float] = None

    @classmethod
    def dense(cls, **kwargs) -> "InferenceSettings":
        return cls(gate_radius=None, top_m=None, **kwargs)


# =============================================================================
# RESPONSIBILITIES
# =============================================================================


@dataclass(frozen=True)
class Responsibilities:
    """Sparse N x K soft assignments: per point, up to M (component index, weight) pairs.

    Index -1 marks padding. Rows without any candidate are unassigned and hold
    zero weight.
    """

    indices: np.ndarray  # (N, M) int64
    weights: np.ndarray  # (N, M)
    num_components: int

    @classmethod
    def from_dense(cls, gamma: np.ndarray) -> "Responsibilities":
        gamma = np.asarray(gamma, dtype=np.float64)
        N, K = gamma.shape
        return cls(np.tile(np.arange(K, dtype=np.int64), (N, 1)), gamma.copy(), K)

    @classmethod
    def empty(cls, num_components: int) -> "Responsibilities":
        return cls(np.zeros((0, 1), dtype=np.int64), np.zeros((0, 1)), num_components)

    @property
    def num_points(self) -> int:
        return int(self.indices.shape[0])

    @property
    def assigned(self) -> np.ndarray:
        return np.any(self.indices >= 0, axis=1)

    @property
    def unassigned(self) -> np.ndarray:
        return ~self.assigned

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_points, self.num_components))
        rows, cols = np.nonzero(self.indices >= 0)
        np.add.at(dense, (rows, self.indices[rows, cols]), self.weights[rows, cols])
        return dense

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())

    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class ElboReport:
    """ELBO decomposition; ``total`` equals the signed sum of the other fields."""

    total: float
    expected_loglik_spatial: float
    expected_loglik_color: float
    expected_log_weight: float
    assignment_entropy: float
    kl_terms: float

    @classmethod
    def assemble(cls, spatial: float, color: float, weight: float, entropy: float, kl: float) -> "ElboReport":
        return cls(spatial + color + weight + entropy - kl, spatial, color, weight, entropy, kl)


def world_points(points: PointBatch, pose: "PosePosterior") -> np.ndarray:
    """Points mapped to the world frame by the pose mean."""
    if len(points) == 0:
        return np.zeros((0, 3))
    return act(pose.fold().inverse(), points.positions)


def point_covariances(world: np.ndarray, pose: "PosePosterior") -> Optional[np.ndarray]:
    """World-frame covariance of each point induced by the pose uncertainty, first order."""
    if world.shape[0] == 0 or not np.any(pose.sigma_xi):
        return None
    J = inverse_action_jacobians(world)
    return np.einsum("nij,jk,nlk->nil", J, pose.sigma_xi, J)


def _component_constants(params: MixtureParams):
    spatial, color = params.spatial, params.color
    const_s = 0.5 * spatial.expected_log_det_precision() - 1.5 * LOG_2PI - 1.5 / spatial.kappa
    const_c = 0.5 * color.expected_log_det_precision() - 1.5 * LOG_2PI - 1.5 / color.kappa
    return const_s, spatial.psi_inverse(), const_c, color.psi_inverse()


def pair_terms(world: np.ndarray, colors: np.ndarray, params: MixtureParams, indices: np.ndarray, point_cov: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spatial, color and weight terms of the log-responsibility for every (point, candidate) pair.

    Padding entries (index -1) come back as zero.
    """
    const_s, pinv_s, const_c, pinv_c = _component_constants(params)
    log_w = params.expected_log_weights()
    valid = indices >= 0
    k = np.where(valid, indices, 0)

    diff = world[:, None, :] - params.spatial.m[k]
    quad = np.einsum("nmi,nmij,nmj->nm", diff, pinv_s[k], diff)
    if point_cov is not None:
        quad = quad + np.einsum("nmij,nji->nm", pinv_s[k], point_cov)
    ell_s = const_s[k] - 0.5 * params.spatial.nu[k] * quad

    diff_c = colors[:, None, :] - params.color.m[k]
    quad_c = np.einsum("nmi,nmij,nmj->nm", diff_c, pinv_c[k], diff_c)
    ell_c = const_c[k] - 0.5 * params.color.nu[k] * quad_c

    zero = np.zeros_like(ell_s)
    return np.where(valid, ell_s, zero), np.where(valid, ell_c, zero), np.where(valid, log_w[k], zero)


def candidate_components(world: np.ndarray, means: np.ndarray, gate_radius: Optional[float], top_m: Optional[int]) -> np.ndarray:
    """Per point, the nearest component indices within gate_radius (-1 padded)."""
    N, K = world.shape[0], means.shape[0]
    if gate_radius is None:
        return np.tile(np.arange(K, dtype=np.int64), (N, 1))
    k = K if top_m is None else max(1, min(top_m, K))
    _, idx = cKDTree(means).query(world, k=k, distance_upper_bound=gate_radius)
    idx = np.asarray(idx, dtype=np.int64).reshape(N, k)
    return np.where(idx >= K, -1, idx)


def compute_responsibilities(
    points: PointBatch,
    splat_map: SplatMap,
    pose: "PosePosterior",
    gate_radius: Optional[float] = InferenceDefaults.GATE_RADIUS,
    top_m: Optional[int] = InferenceDefaults.TOP_M,
    propagate_pose_uncertainty: bool = InferenceDefaults.PROPAGATE_POSE_UNCERTAINTY,
) -> Responsibilities:
    """E-step: log gamma_nk = E[log p(s_n)] + E[log p(c_n)] + E[log pi_k] - log Z_n over gated candidates.

    Points with no candidate are left unassigned (zero weight); they do not
    contribute statistics and the caller may queue them for insertion.
    """
    K = splat_map.size
    if len(points) == 0 or K == 0:
        return Responsibilities(np.full((len(points), 1), -1, dtype=np.int64), np.zeros((len(points), 1)), K)

    world = world_points(points, pose)
    cov = point_covariances(world, pose) if propagate_pose_uncertainty else None
    indices = candidate_components(world, splat_map.means, gate_radius, top_m)
    ell_s, ell_c, log_w = pair_terms(world, points.colors, splat_map.posterior, indices, cov)

    valid = indices >= 0
    log_rho = np.where(valid, ell_s + ell_c + log_w, -np.inf)
    assigned = valid.any(axis=1)
    weights = np.zeros_like(log_rho)
    if np.any(assigned):
        rows = log_rho[assigned]
        weights[assigned] = np.exp(rows - logsumexp(rows, axis=1, keepdims=True))

    unassigned = int((~assigned).sum())
    if unassigned:
        logger.debug("%d of %d points have no component within %.3f m", unassigned, len(points), gate_radius or np.inf)
    return Responsibilities(indices, weights, K)


# =============================================================================
# ELBO AND THE M-STEP
# =============================================================================


def elbo(
    points: PointBatch,
    splat_map: SplatMap,
    gamma: Responsibilities,
    pose: "PosePosterior",
    propagate_pose_uncertainty: bool = InferenceDefaults.PROPAGATE_POSE_UNCERTAINTY,
) -> ElboReport:
    """Evidence lower bound of the batch under the map posterior, relative to the map prior."""
    kl = splat_map.posterior.kl_divergence(splat_map.prior)
    if len(points) == 0 or gamma.num_points == 0:
        return ElboReport.assemble(0.0, 0.0, 0.0, 0.0, kl)

    world = world_points(points, pose)
    cov = point_covariances(world, pose) if propagate_pose_uncertainty else None
    ell_s, ell_c, log_w = pair_terms(world, points.colors, splat_map.posterior, gamma.indices, cov)
    g = gamma.weights
    return ElboReport.assemble(float((g * ell_s).sum()), float((g * ell_c).sum()), float((g * log_w).sum()), gamma.entropy(), kl)


def batch_stats(
    points: PointBatch,
    gamma: Responsibilities,
    pose: "PosePosterior",
    size: int,
    propagate_pose_uncertainty: bool = InferenceDefaults.PROPAGATE_POSE_UNCERTAINTY,
) -> MixtureStats:
    """Spatial and color statistics of one batch, in a single pass."""
    if len(points) == 0:
        return MixtureStats.zeros(size)
    mean = pose.fold()
    cov = point_covariances(world_points(points, pose), pose) if propagate_pose_uncertainty else None
    return MixtureStats(accumulate_spatial_stats(points, gamma, mean, size, cov), accumulate_color_stats(points, gamma, size))


def cavi_step(
    points: PointBatch,
    splat_map: SplatMap,
    pose: "PosePosterior",
    settings: InferenceSettings = InferenceSettings(),
) -> Tuple[SplatMap, Responsibilities, ElboReport]:
    """One E-step and one M-step; returns the updated map and the ELBO after the step."""
    K = splat_map.size
    if len(points) == 0:
        return splat_map, Responsibilities.empty(K), elbo(points, splat_map, Responsibilities.empty(K), pose)

    gamma = compute_responsibilities(points, splat_map, pose, settings.gate_radius, settings.top_m, settings.propagate_pose_uncertainty)
    stats = batch_stats(points, gamma, pose, K, settings.propagate_pose_uncertainty)
    updated = splat_map.with_stats(stats, settings.eigen_floor)
    return updated, gamma, elbo(points, updated, gamma, pose, settings.propagate_pose_uncertainty)


@dataclass
class CaviTrace:
    """Collects one row per CAVI step for the optional CSV trace."""

    rows: List[dict] = field(default_factory=list)

    def record(self, frame: int, step: int, report: ElboReport) -> None:
        self.rows.append({"frame": frame, "step": step, **asdict(report)})

    def write_csv(self, path: str) -> None:
        fieldnames = ["frame", "step"] + list(ElboReport.__dataclass_fields__)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=fieldnames)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({key: (f"{value:.17g}" if isinstance(value, float) else value) for key, value in row.items()})


def run_cavi(
    points: PointBatch,
    splat_map: SplatMap,
    pose: "PosePosterior",
    sweeps: int = InferenceDefaults.CAVI_SWEEPS,
    settings: InferenceSettings = InferenceSettings(),
    relative_tol: float = InferenceDefaults.RELATIVE_TOL,
    trace: Optional[CaviTrace] = None,
    frame: int = 0,
) -> Tuple[SplatMap, Responsibilities, List[ElboReport]]:
    """Up to ``sweeps`` CAVI steps, stopping early once the ELBO gain is below relative_tol * |ELBO|."""
    history: List[ElboReport] = []
    gamma = Responsibilities.empty(splat_map.size)
    for step in range(max(1, sweeps)):
        splat_map, gamma, report = cavi_step(points, splat_map, pose, settings)
        history.append(report)
        if trace is not None:
            trace.record(frame, step, report)
        if len(history) > 1:
            gain = history[-1].total - history[-2].total
            if gain < -1e-8 * max(1.0, abs(history[-2].total)):
                logger.warning("frame %d: ELBO decreased by %.3e at CAVI step %d", frame, -gain, step)
            if abs(gain) < relative_tol * abs(history[-1].total):
                break
    return splat_map, gamma, history
