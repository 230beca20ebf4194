"""
SE(3) group and se(3) algebra operations.

Twists are 6-vectors ordered [rho; phi]: translation part (meters) stacked on
the rotation part (radians). Perturbations act on the right, T = T_bar exp(dxi^),
so every pose covariance lives in the right tangent space of its anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import polar

from .errors import AngleNearPi, DimensionMismatch

# =============================================================================
# NUMERICAL CONFIGURATION
# =============================================================================


class LieConfig:
    """Numerical thresholds for the exponential and logarithm maps."""

    # Below this rotation angle the Rodrigues coefficients use their Taylor series
    SMALL_ANGLE = 1e-8

    # The logarithm refuses angles within this margin of pi
    PI_MARGIN = 1e-6

    # Rotations are projected back onto SO(3) after this many compositions
    ORTHONORMALIZE_EVERY = 100


# =============================================================================
# ALGEBRA
# =============================================================================


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an (N, 3) array."""
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of skew for an antisymmetric 3x3 matrix."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=np.float64)


def wedge(xi: np.ndarray) -> np.ndarray:
    """4x4 matrix form of a twist."""
    xi = _as_twist(xi)
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def _as_twist(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if xi.shape != (6,):
        raise DimensionMismatch(f"twist must have 6 entries, got {xi.shape[0]}")
    return xi


def _rodrigues_coefficients(theta: float):
    """A = sin(t)/t, B = (1 - cos(t))/t^2, C = (t - sin(t))/t^3."""
    if theta < LieConfig.SMALL_ANGLE:
        t2 = theta * theta
        return (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    half = 0.5 * theta
    sin_half = math.sin(half)
    A = math.sin(theta) / theta
    B = 2.0 * sin_half * sin_half / (theta * theta)
    C = (1.0 - A) / (theta * theta)
    return A, B, C


# =============================================================================
# GROUP
# =============================================================================


@dataclass(frozen=True)
class RigidTransform:
    """A rigid motion p -> R p + t.

    ``compositions`` counts products since the rotation was last projected onto
    SO(3); it is bookkeeping only and does not take part in comparisons.
    """

    R: np.ndarray
    t: np.ndarray
    compositions: int = 0

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise DimensionMismatch(f"rigid transform needs a 3x3 rotation and a 3-vector, got {R.shape} and {t.shape}")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise DimensionMismatch(f"homogeneous transform must be 4x4, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t: np.ndarray) -> "RigidTransform":
        return cls(np.eye(3), t)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t, self.compositions)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self * other, re-orthonormalized every LieConfig.ORTHONORMALIZE_EVERY products."""
        R = self.R @ other.R
        t = self.R @ other.t + self.t
        count = max(self.compositions, other.compositions) + 1
        if count >= LieConfig.ORTHONORMALIZE_EVERY:
            R = orthonormalize(R)
            count = 0
        return RigidTransform(R, t, count)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def act(self, p: np.ndarray) -> np.ndarray:
        return act(self, p)

    def orthonormality_error(self) -> float:
        """Frobenius norm of R^T R - I."""
        return float(np.linalg.norm(self.R.T @ self.R - np.eye(3)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return self.orthonormality_error() <= tol and abs(np.linalg.det(self.R) - 1.0) <= tol

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    def __hash__(self) -> int:
        return hash((self.R.tobytes(), self.t.tobytes()))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _ = polar(np.asarray(R, dtype=np.float64))
    if np.linalg.det(U) < 0:
        raise ValueError("matrix is closer to a reflection than to a rotation")
    return U


def act(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    """T applied to a point (3,) or a stack of points (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return T.R @ p + T.t
    return p @ T.R.T + T.t


def exp_se3(xi: np.ndarray) -> RigidTransform:
    """Closed-form exponential; the left Jacobian V maps rho to the translation."""
    xi = _as_twist(xi)
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    A, B, C = _rodrigues_coefficients(theta)
    K = skew(phi)
    K2 = K @ K
    R = np.eye(3) + A * K + B * K2
    V = np.eye(3) + B * K + C * K2
    return RigidTransform(R, V @ rho)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, pi]."""
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


def log_se3(T: RigidTransform) -> np.ndarray:
    """Inverse of exp_se3 for rotation angles below pi - LieConfig.PI_MARGIN."""
    R = T.R
    theta = rotation_angle(R)
    if theta >= math.pi - LieConfig.PI_MARGIN:
        raise AngleNearPi(theta)
    axis_sin = 0.5 * vee(R - R.T)
    if theta < LieConfig.SMALL_ANGLE:
        t2 = theta * theta
        phi = axis_sin * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
        D = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        phi = axis_sin * (theta / math.sin(theta))
        half = 0.5 * theta
        D = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    K = skew(phi)
    V_inv = np.eye(3) - 0.5 * K + D * (K @ K)
    return np.concatenate([V_inv @ T.t, phi])


# =============================================================================
# JACOBIANS
# =============================================================================


def pose_jacobian(T_bar: RigidTransform, mu: np.ndarray) -> np.ndarray:
    """d/d(dxi) of (T_bar exp(dxi^)) applied to mu, at dxi = 0: [R | -R skew(mu)]."""
    mu = np.asarray(mu, dtype=np.float64).reshape(3)
    return np.hstack([T_bar.R, -T_bar.R @ skew(mu)])


def pose_jacobians(T_bar: RigidTransform, mus: np.ndarray) -> np.ndarray:
    """pose_jacobian for every row of an (K, 3) array, shape (K, 3, 6)."""
    mus = np.asarray(mus, dtype=np.float64).reshape(-1, 3)
    G = np.empty((mus.shape[0], 3, 6))
    G[:, :, :3] = T_bar.R
    G[:, :, 3:] = -np.einsum("ij,kjl->kil", T_bar.R, skew_batch(mus))
    return G


def inverse_action_jacobians(w: np.ndarray) -> np.ndarray:
    """d/d(dxi) of (T_bar exp(dxi^))^-1 applied to s, where w = T_bar^-1 s: [-I | skew(w)]."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, 3)
    J = np.empty((w.shape[0], 3, 6))
    J[:, :, :3] = -np.eye(3)
    J[:, :, 3:] = skew_batch(w)
    return J

