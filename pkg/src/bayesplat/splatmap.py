"""
The conjugate Bayesian splat map.

Each component carries a Normal-Inverse-Wishart posterior over its spatial
Gaussian, another over its color Gaussian, and a Dirichlet pseudo-count for its
mixture weight. Parameters are stored struct-of-arrays (one array per field,
leading axis = component) so that E- and M-steps vectorize.

The map keeps two parameter sets:

* ``prior``: the conjugate prior of the batch currently being fitted. It
  already contains every observation absorbed so far.
* ``posterior``: ``prior`` updated with the current batch's statistics.

Each M-step recomputes the posterior from the prior, so repeated CAVI sweeps on
the same batch never count data twice. ``rebase`` starts a new batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, List, Literal, Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln, multigammaln

from .errors import DimensionMismatch, EmptyBatch, NonPsdScale
from .frontend import PointBatch
from .lie import RigidTransform, act
from .units import unit_to_color

if TYPE_CHECKING:
    from .infer import Responsibilities

logger = logging.getLogger(__name__)

Channel = Literal["spatial", "color"]

LOG_2PI = float(np.log(2.0 * np.pi))


class MapDefaults:
    """Prior hyperparameters and numerical hygiene thresholds."""

    SPATIAL_KAPPA = 1.0
    SPATIAL_NU = 5.0  # d + 2
    COLOR_KAPPA = 1.0
    COLOR_NU = 5.0
    COLOR_PSI = 0.01
    ALPHA_PRIOR = 1.0

    NEIGHBORS = 8
    VARIANCE_FLOOR = 1e-6  # m^2

    # Effective counts below this leave a component untouched
    MIN_EFFECTIVE_COUNT = 1e-12


# =============================================================================
# SUFFICIENT STATISTICS
# =============================================================================


@dataclass(frozen=True)
class SufficientStats:
    """Per-component weighted count, first and second moments of one channel."""

    n: np.ndarray  # (K,)
    sum1: np.ndarray  # (K, d)
    sum2: np.ndarray  # (K, d, d)

    @classmethod
    def zeros(cls, size: int, dim: int = 3) -> "SufficientStats":
        return cls(np.zeros(size), np.zeros((size, dim)), np.zeros((size, dim, dim)))

    @property
    def size(self) -> int:
        return int(self.n.shape[0])

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(self.n + other.n, self.sum1 + other.sum1, self.sum2 + other.sum2)

    def take(self, indices: np.ndarray) -> "SufficientStats":
        return SufficientStats(self.n[indices], self.sum1[indices], self.sum2[indices])

    def pad(self, extra: int) -> "SufficientStats":
        """Append zero statistics for ``extra`` new components."""
        return SufficientStats(
            np.concatenate([self.n, np.zeros(extra)]),
            np.concatenate([self.sum1, np.zeros((extra,) + self.sum1.shape[1:])]),
            np.concatenate([self.sum2, np.zeros((extra,) + self.sum2.shape[1:])]),
        )


@dataclass(frozen=True)
class MixtureStats:
    """Spatial and color statistics gathered in one pass over a batch."""

    spatial: SufficientStats
    color: SufficientStats

    @classmethod
    def zeros(cls, size: int) -> "MixtureStats":
        return cls(SufficientStats.zeros(size), SufficientStats.zeros(size))

    @property
    def size(self) -> int:
        return self.spatial.size

    def __add__(self, other: "MixtureStats") -> "MixtureStats":
        return MixtureStats(self.spatial + other.spatial, self.color + other.color)

    def take(self, indices: np.ndarray) -> "MixtureStats":
        return MixtureStats(self.spatial.take(indices), self.color.take(indices))

    def pad(self, extra: int) -> "MixtureStats":
        return MixtureStats(self.spatial.pad(extra), self.color.pad(extra))


def _weighted_moments(values: np.ndarray, gamma: "Responsibilities", size: int, extra_second: Optional[np.ndarray] = None) -> SufficientStats:
    if values.shape[0] != gamma.num_points:
        raise DimensionMismatch(f"{values.shape[0]} points but responsibilities for {gamma.num_points}")
    dim = values.shape[1]
    if values.shape[0] == 0:
        return SufficientStats.zeros(size, dim)

    idx = gamma.indices.reshape(-1)
    w = gamma.weights.reshape(-1)
    rows = np.repeat(np.arange(gamma.num_points), gamma.indices.shape[1])
    keep = (idx >= 0) & (w > 0)
    idx, w, rows = idx[keep], w[keep], rows[keep]

    n = np.bincount(idx, weights=w, minlength=size)
    sum1 = np.stack([np.bincount(idx, weights=w * values[rows, i], minlength=size) for i in range(dim)], axis=1)

    second = values[:, :, None] * values[:, None, :]
    if extra_second is not None:
        second = second + extra_second
    second = second.reshape(values.shape[0], dim * dim)[rows] * w[:, None]
    sum2 = np.stack([np.bincount(idx, weights=second[:, j], minlength=size) for j in range(dim * dim)], axis=1)
    return SufficientStats(n, sum1, sum2.reshape(size, dim, dim))


def accumulate_spatial_stats(
    points: PointBatch,
    gamma: "Responsibilities",
    pose_mean: RigidTransform,
    size: Optional[int] = None,
    point_covariances: Optional[np.ndarray] = None,
) -> SufficientStats:
    """Weighted moments of the world-frame points w_n = pose_mean^-1 applied to s_n.

    ``point_covariances`` (N, 3, 3) adds each point's world-frame uncertainty to
    its second moment.
    """
    size = gamma.num_components if size is None else size
    world = act(pose_mean.inverse(), points.positions) if len(points) else points.positions
    return _weighted_moments(world, gamma, size, point_covariances)


def accumulate_color_stats(points: PointBatch, gamma: "Responsibilities", size: Optional[int] = None) -> SufficientStats:
    size = gamma.num_components if size is None else size
    return _weighted_moments(points.colors, gamma, size)


# =============================================================================
# NORMAL-INVERSE-WISHART
# =============================================================================


def _symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def floor_eigenvalues(A: np.ndarray, floor: float) -> np.ndarray:
    """Clip the eigenvalues of symmetric matrices (..., d, d) from below."""
    values, vectors = np.linalg.eigh(_symmetrize(A))
    values = np.maximum(values, floor)
    return _symmetrize(np.einsum("...ij,...j,...kj->...ik", vectors, values, vectors))


@dataclass(frozen=True)
class NiwPosterior:
    """NIW(m, kappa, Psi, nu) over a d-dimensional Gaussian, batched over leading axes.

    Sigma ~ IW(Psi, nu) and mu | Sigma ~ N(m, Sigma / kappa).
    """

    m: np.ndarray
    kappa: np.ndarray
    psi: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=np.float64))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=np.float64))
        if self.psi.shape != self.m.shape + (self.dim,):
            raise DimensionMismatch(f"NIW scale shape {self.psi.shape} does not match mean shape {self.m.shape}")

    @classmethod
    def broadcast(cls, m: np.ndarray, kappa: float, psi: np.ndarray, nu: float) -> "NiwPosterior":
        """Batch of K posteriors sharing kappa, nu and (possibly) Psi."""
        m = np.asarray(m, dtype=np.float64)
        K, d = m.shape
        return cls(m, np.full(K, kappa), np.broadcast_to(psi, (K, d, d)).copy(), np.full(K, nu))

    @property
    def dim(self) -> int:
        return int(self.m.shape[-1])

    @property
    def size(self) -> int:
        return int(self.m.shape[0]) if self.m.ndim > 1 else 1

    def __getitem__(self, index) -> "NiwPosterior":
        return NiwPosterior(self.m[index], self.kappa[index], self.psi[index], self.nu[index])

    def take(self, indices: np.ndarray) -> "NiwPosterior":
        return NiwPosterior(self.m[indices], self.kappa[indices], self.psi[indices], self.nu[indices])

    def concat(self, other: "NiwPosterior") -> "NiwPosterior":
        return NiwPosterior(
            np.concatenate([self.m, other.m]),
            np.concatenate([self.kappa, other.kappa]),
            np.concatenate([self.psi, other.psi]),
            np.concatenate([self.nu, other.nu]),
        )

    # --- expectations ------------------------------------------------------

    def expected_covariance(self) -> np.ndarray:
        """E[Sigma] = Psi / (nu - d - 1)."""
        return self.psi / (self.nu - self.dim - 1.0)[..., None, None]

    def psi_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.psi)

    def log_det_psi(self) -> np.ndarray:
        sign, logdet = np.linalg.slogdet(self.psi)
        return logdet

    def expected_log_det_precision(self) -> np.ndarray:
        """E[log |Sigma^-1|] = sum_i digamma((nu + 1 - i) / 2) + d log 2 - log |Psi|."""
        d = self.dim
        i = np.arange(1, d + 1)
        psi_sum = digamma((self.nu[..., None] + 1.0 - i) / 2.0).sum(axis=-1)
        return psi_sum + d * np.log(2.0) - self.log_det_psi()

    def expected_log_likelihood(self, x: np.ndarray, point_covariance: Optional[np.ndarray] = None) -> np.ndarray:
        """E_q[log N(x | mu, Sigma)], broadcasting x (..., d) against the batch."""
        d = self.dim
        diff = np.asarray(x, dtype=np.float64) - self.m
        psi_inv = self.psi_inverse()
        quad = np.einsum("...i,...ij,...j->...", diff, psi_inv, diff)
        if point_covariance is not None:
            quad = quad + np.einsum("...ij,...ji->...", psi_inv, point_covariance)
        return 0.5 * self.expected_log_det_precision() - 0.5 * d * LOG_2PI - 0.5 * (self.nu * quad + d / self.kappa)

    # --- conjugate update --------------------------------------------------

    def update(self, stats: SufficientStats, eigen_floor: Optional[float] = None) -> "NiwPosterior":
        """Conjugate update with weighted data; components with n < 1e-12 are returned unchanged.

        Raises NonPsdScale when an updated scale matrix is not positive definite,
        unless ``eigen_floor`` is given, in which case its eigenvalues are floored.
        """
        n = stats.n
        active = n >= MapDefaults.MIN_EFFECTIVE_COUNT
        if not np.any(active):
            return self

        n_safe = np.where(active, n, 1.0)
        kappa_new = self.kappa + n
        m_new = (self.kappa[..., None] * self.m + stats.sum1) / kappa_new[..., None]
        xbar = stats.sum1 / n_safe[..., None]
        scatter = stats.sum2 - stats.sum1[..., :, None] * stats.sum1[..., None, :] / n_safe[..., None, None]
        diff = xbar - self.m
        shrink = (self.kappa * n / kappa_new)[..., None, None]
        psi_new = _symmetrize(self.psi + scatter + shrink * diff[..., :, None] * diff[..., None, :])

        min_eig = np.linalg.eigvalsh(psi_new)[..., 0]
        bad = active & ~(min_eig > 0)
        if np.any(bad):
            if eigen_floor is None:
                k = int(np.flatnonzero(np.atleast_1d(bad))[0])
                raise NonPsdScale(k, float(np.atleast_1d(min_eig)[k]))
            psi_new = np.where(bad[..., None, None], floor_eigenvalues(psi_new, eigen_floor), psi_new)

        return NiwPosterior(
            np.where(active[..., None], m_new, self.m),
            np.where(active, kappa_new, self.kappa),
            np.where(active[..., None, None], psi_new, self.psi),
            np.where(active, self.nu + n, self.nu),
        )

    def kl_divergence(self, prior: "NiwPosterior") -> np.ndarray:
        """KL(self || prior), per component."""
        d = self.dim
        psi_inv = self.psi_inverse()
        diff = self.m - prior.m
        mean_term = 0.5 * (d * prior.kappa / self.kappa + prior.kappa * self.nu * np.einsum("...i,...ij,...j->...", diff, psi_inv, diff) - d + d * np.log(self.kappa / prior.kappa))

        i = np.arange(1, d + 1)
        digamma_sum = digamma((self.nu[..., None] + 1.0 - i) / 2.0).sum(axis=-1)
        trace = np.einsum("...ij,...ji->...", prior.psi, psi_inv)
        log_det_ratio = prior.log_det_psi() - self.log_det_psi()
        wishart_term = (
            -0.5 * prior.nu * log_det_ratio
            + 0.5 * self.nu * (trace - d)
            + multigammaln_batch(prior.nu / 2.0, d)
            - multigammaln_batch(self.nu / 2.0, d)
            + 0.5 * (self.nu - prior.nu) * digamma_sum
        )
        return mean_term + wishart_term

    def is_valid(self) -> bool:
        if np.any(self.kappa <= 0) or np.any(self.nu <= self.dim - 1):
            return False
        if not np.allclose(self.psi, np.swapaxes(self.psi, -1, -2), atol=1e-12):
            return False
        return bool(np.all(np.linalg.eigvalsh(self.psi)[..., 0] > 0))


def multigammaln_batch(a: np.ndarray, d: int) -> np.ndarray:
    """Elementwise log multivariate gamma."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return np.asarray(multigammaln(float(a), d))
    j = np.arange(d)
    return d * (d - 1) / 4.0 * np.log(np.pi) + gammaln(a[..., None] - j / 2.0).sum(axis=-1)


# =============================================================================
# MIXTURE PARAMETERS
# =============================================================================


def dirichlet_expected_log(alpha: np.ndarray) -> np.ndarray:
    """E[log pi_k] = digamma(alpha_k) - digamma(sum alpha)."""
    return digamma(alpha) - digamma(alpha.sum())


def dirichlet_kl(alpha: np.ndarray, alpha0: np.ndarray) -> float:
    total = alpha.sum()
    return float(
        gammaln(total)
        - gammaln(alpha).sum()
        - gammaln(alpha0.sum())
        + gammaln(alpha0).sum()
        + ((alpha - alpha0) * (digamma(alpha) - digamma(total))).sum()
    )


@dataclass(frozen=True)
class MixtureParams:
    """Variational parameters of all components."""

    spatial: NiwPosterior
    color: NiwPosterior
    alpha: np.ndarray

    @property
    def size(self) -> int:
        return int(self.alpha.shape[0])

    def update(self, stats: MixtureStats, eigen_floor: Optional[float] = None) -> "MixtureParams":
        return MixtureParams(
            self.spatial.update(stats.spatial, eigen_floor),
            self.color.update(stats.color, eigen_floor),
            np.where(stats.spatial.n >= MapDefaults.MIN_EFFECTIVE_COUNT, self.alpha + stats.spatial.n, self.alpha),
        )

    def take(self, indices: np.ndarray) -> "MixtureParams":
        return MixtureParams(self.spatial.take(indices), self.color.take(indices), self.alpha[indices])

    def concat(self, other: "MixtureParams") -> "MixtureParams":
        return MixtureParams(self.spatial.concat(other.spatial), self.color.concat(other.color), np.concatenate([self.alpha, other.alpha]))

    def expected_weights(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()

    def expected_log_weights(self) -> np.ndarray:
        return dirichlet_expected_log(self.alpha)

    def kl_divergence(self, prior: "MixtureParams") -> float:
        """Sum of NIW and Dirichlet KL divergences to ``prior``."""
        if self.size == 0:
            return 0.0
        return float(self.spatial.kl_divergence(prior.spatial).sum() + self.color.kl_divergence(prior.color).sum() + dirichlet_kl(self.alpha, prior.alpha))


@dataclass(frozen=True)
class GaussianComponent:
    """A single component, detached from the struct-of-arrays storage."""

    spatial: NiwPosterior
    color: NiwPosterior
    alpha: float
    last_update_keyframe: int = 0


def update_component(comp: GaussianComponent, stats: SufficientStats, color_stats: SufficientStats) -> GaussianComponent:
    """Conjugate update of one component from single-component statistics (n, sum1, sum2 without a leading axis)."""
    n = float(np.asarray(stats.n))
    if n < MapDefaults.MIN_EFFECTIVE_COUNT:
        return comp
    spatial = _single(comp.spatial).update(_single_stats(stats))[0]
    color = _single(comp.color).update(_single_stats(color_stats))[0]
    return replace(comp, spatial=spatial, color=color, alpha=comp.alpha + n)


def _single(niw: NiwPosterior) -> NiwPosterior:
    return NiwPosterior(niw.m[None], np.atleast_1d(niw.kappa), niw.psi[None], np.atleast_1d(niw.nu))


def _single_stats(stats: SufficientStats) -> SufficientStats:
    return SufficientStats(np.atleast_1d(stats.n), np.asarray(stats.sum1)[None], np.asarray(stats.sum2)[None])


def expected_log_likelihood(comp: GaussianComponent, w: np.ndarray, channel: Channel = "spatial") -> float:
    niw = comp.spatial if channel == "spatial" else comp.color
    return float(niw.expected_log_likelihood(w))


# =============================================================================
# THE MAP
# =============================================================================


@dataclass(frozen=True)
class SplatMap:
    prior: MixtureParams
    posterior: MixtureParams
    alpha_prior: float = MapDefaults.ALPHA_PRIOR
    last_update_keyframe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    inserted_total: int = 0
    removed_total: int = 0
    respawned_total: int = 0

    @classmethod
    def from_params(cls, params: MixtureParams, alpha_prior: float = MapDefaults.ALPHA_PRIOR, keyframe: int = 0) -> "SplatMap":
        return cls(params, params, alpha_prior, np.full(params.size, keyframe, dtype=np.int64), inserted_total=params.size)

    @property
    def size(self) -> int:
        return self.posterior.size

    def __len__(self) -> int:
        return self.size

    @property
    def means(self) -> np.ndarray:
        return self.posterior.spatial.m

    @property
    def components(self) -> List[GaussianComponent]:
        return [self.component(k) for k in range(self.size)]

    def component(self, k: int) -> GaussianComponent:
        p = self.posterior
        return GaussianComponent(p.spatial[k], p.color[k], float(p.alpha[k]), int(self.last_update_keyframe[k]))

    def expected_weights(self) -> np.ndarray:
        return self.posterior.expected_weights()

    def with_stats(self, stats: MixtureStats, eigen_floor: Optional[float] = None) -> "SplatMap":
        """Posterior = prior updated by ``stats``."""
        return replace(self, posterior=self.prior.update(stats, eigen_floor))

    def with_prior(self, prior: MixtureParams) -> "SplatMap":
        return replace(self, prior=prior)

    def rebase(self) -> "SplatMap":
        """Make the current posterior the prior of the next batch."""
        return replace(self, prior=self.posterior)

    def touch(self, previous_alpha: np.ndarray, keyframe: int) -> "SplatMap":
        """Record ``keyframe`` for every component whose pseudo-count grew since ``previous_alpha``."""
        grew = self.posterior.alpha[: previous_alpha.shape[0]] > previous_alpha
        stamps = self.last_update_keyframe.copy()
        stamps[: previous_alpha.shape[0]][grew] = keyframe
        return replace(self, last_update_keyframe=stamps)

    def append(self, params: MixtureParams, keyframe: int) -> "SplatMap":
        """Add components whose prior and posterior both start at ``params``."""
        return replace(
            self,
            prior=self.prior.concat(params),
            posterior=self.posterior.concat(params),
            last_update_keyframe=np.concatenate([self.last_update_keyframe, np.full(params.size, keyframe, dtype=np.int64)]),
            inserted_total=self.inserted_total + params.size,
        )

    def keep(self, indices: np.ndarray) -> "SplatMap":
        """Retain only the listed components, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            prior=self.prior.take(indices),
            posterior=self.posterior.take(indices),
            last_update_keyframe=self.last_update_keyframe[indices],
            removed_total=self.removed_total + self.size - indices.shape[0],
        )


# =============================================================================
# CONSTRUCTION
# =============================================================================


def neighbor_covariances(world: np.ndarray, neighbors: int, variance_floor: float) -> np.ndarray:
    """Sample covariance of each point's nearest neighbors (itself included), eigenvalues floored."""
    N = world.shape[0]
    k = max(1, min(neighbors, N))
    if k == 1:
        return np.broadcast_to(variance_floor * np.eye(3), (N, 3, 3)).copy()
    _, idx = cKDTree(world).query(world, k=k)
    local = world[idx]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    return floor_eigenvalues(cov, variance_floor)


def component_params(
    world: np.ndarray,
    colors: np.ndarray,
    neighbors: int = MapDefaults.NEIGHBORS,
    variance_floor: float = MapDefaults.VARIANCE_FLOOR,
    alpha_prior: float = MapDefaults.ALPHA_PRIOR,
) -> MixtureParams:
    """Fresh prior parameters, one component per world point."""
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    K = world.shape[0]
    cov = neighbor_covariances(world, neighbors, variance_floor)
    # Scale so that Psi / (nu - d - 1) reproduces the sample covariance
    spatial = NiwPosterior(world, np.full(K, MapDefaults.SPATIAL_KAPPA), cov * (MapDefaults.SPATIAL_NU - 4.0), np.full(K, MapDefaults.SPATIAL_NU))
    color = NiwPosterior.broadcast(colors, MapDefaults.COLOR_KAPPA, MapDefaults.COLOR_PSI * np.eye(3), MapDefaults.COLOR_NU)
    return MixtureParams(spatial, color, np.full(K, alpha_prior))


def init_from_points(
    points: PointBatch,
    pose: RigidTransform,
    neighbors: int = MapDefaults.NEIGHBORS,
    variance_floor: float = MapDefaults.VARIANCE_FLOOR,
    alpha_prior: float = MapDefaults.ALPHA_PRIOR,
) -> SplatMap:
    """One component per point of an already filtered batch.

    ``pose`` maps world to camera coordinates, so components sit at pose^-1 applied to each point.
    """
    if len(points) == 0:
        raise EmptyBatch("cannot initialize a map from an empty point batch")
    world = act(pose.inverse(), points.positions)
    params = component_params(world, points.colors, neighbors, variance_floor, alpha_prior)
    logger.info("initialized map with %d components", params.size)
    return SplatMap.from_params(params, alpha_prior)


def expected_log_weight(splat_map: SplatMap, k: int) -> float:
    return float(splat_map.posterior.expected_log_weights()[k])


# =============================================================================
# PLY EXPORT
# =============================================================================

_PLY_FIELDS = [
    ("x", "<f4"),
    ("y", "<f4"),
    ("z", "<f4"),
    ("red", "u1"),
    ("green", "u1"),
    ("blue", "u1"),
    ("cov_xx", "<f4"),
    ("cov_xy", "<f4"),
    ("cov_xz", "<f4"),
    ("cov_yy", "<f4"),
    ("cov_yz", "<f4"),
    ("cov_zz", "<f4"),
    ("alpha", "<f4"),
]
_PLY_TYPES = {"<f4": "float", "u1": "uchar"}
_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def write_ply(splat_map: SplatMap, path: str) -> None:
    """Binary little-endian PLY: mean, 8-bit color, upper triangle of E[Sigma], Dirichlet count."""
    post = splat_map.posterior
    vertices = np.zeros(post.size, dtype=_PLY_FIELDS)
    for axis, name in enumerate("xyz"):
        vertices[name] = post.spatial.m[:, axis]
    rgb = unit_to_color(post.color.m)
    for axis, name in enumerate(("red", "green", "blue")):
        vertices[name] = rgb[:, axis]
    cov = post.spatial.expected_covariance()
    for (i, j), name in zip(_UPPER, ("cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz")):
        vertices[name] = cov[:, i, j]
    vertices["alpha"] = post.alpha

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {post.size}"]
    header += [f"property {_PLY_TYPES[kind]} {name}" for name, kind in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("ascii"))
        handle.write(vertices.tobytes())


def read_ply(path: str, alpha_prior: float = MapDefaults.ALPHA_PRIOR) -> SplatMap:
    """Parse a map written by write_ply back into a SplatMap (posterior = prior)."""
    with open(path, "rb") as handle:
        if handle.readline().strip() != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        count = None
        names = []
        while True:
            line = handle.readline()
            if not line:
                raise ValueError(f"{path}: header ended without end_header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "binary_little_endian":
                raise ValueError(f"{path}: unsupported PLY format {tokens[1]}")
            if tokens[0] == "element" and tokens[1] == "vertex":
                count = int(tokens[2])
            elif tokens[0] == "property":
                names.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if count is None or names != [name for name, _ in _PLY_FIELDS]:
            raise ValueError(f"{path}: unexpected vertex layout {names}")
        vertices = np.frombuffer(handle.read(), dtype=_PLY_FIELDS, count=count)

    K = vertices.shape[0]
    means = np.stack([vertices[name].astype(np.float64) for name in "xyz"], axis=1)
    colors = np.stack([vertices[name].astype(np.float64) / 255.0 for name in ("red", "green", "blue")], axis=1)
    cov = np.zeros((K, 3, 3))
    for (i, j), name in zip(_UPPER, ("cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz")):
        cov[:, i, j] = vertices[name]
        cov[:, j, i] = vertices[name]
    spatial = NiwPosterior(means, np.full(K, MapDefaults.SPATIAL_KAPPA), cov * (MapDefaults.SPATIAL_NU - 4.0), np.full(K, MapDefaults.SPATIAL_NU))
    color = NiwPosterior.broadcast(colors, MapDefaults.COLOR_KAPPA, MapDefaults.COLOR_PSI * np.eye(3), MapDefaults.COLOR_NU)
    params = MixtureParams(spatial, color, vertices["alpha"].astype(np.float64))
    return SplatMap.from_params(params, alpha_prior)
