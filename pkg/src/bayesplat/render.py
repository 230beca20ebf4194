"""
Forward splat rasterizer and image-quality metrics.

Components are projected with the local affine (EWA) approximation of the
pinhole camera and alpha-composited in depth order. Rendering only reads the
map; nothing in the inference path depends on it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .frontend import CameraIntrinsics, FrameObservation
from .lie import RigidTransform, act
from .splatmap import GaussianComponent, SplatMap
from .units import color_to_unit, meters_to_depth, unit_to_color

logger = logging.getLogger(__name__)

CompositingOrder = Literal["front_to_back", "back_to_front"]
DepthMode = Literal["center", "ray"]


class RenderDefaults:
    """Rasterization and metric constants."""

    Z_NEAR = 0.05  # m
    SIGMA_CUTOFF = 3.0
    COV2D_FLOOR = 0.3  # px^2
    MAX_OPACITY = 0.99
    OPACITY_GAIN = 1.0

    # Pixels with accumulated opacity above this count as observed
    ALPHA_VALID = 0.5

    PSNR_CAP = 99.0  # dB

    SSIM_SIGMA = 1.5
    SSIM_RADIUS = 5  # 11x11 window
    SSIM_C1 = (0.01 * 255.0) ** 2
    SSIM_C2 = (0.03 * 255.0) ** 2

    # Millimeter depth PNGs
    PNG_DEPTH_SCALE = 1000.0


@dataclass
class RenderedFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where nothing rendered
    alpha: np.ndarray  # (H, W) accumulated opacity

    def normalized_depth(self, threshold: float = RenderDefaults.ALPHA_VALID) -> np.ndarray:
        """Composited depth divided by alpha where alpha exceeds ``threshold``, 0 elsewhere."""
        out = np.zeros_like(self.depth)
        valid = self.alpha > threshold
        out[valid] = self.depth[valid] / self.alpha[valid]
        return out


# =============================================================================
# PROJECTION
# =============================================================================


@dataclass
class ProjectedSplats:
    """Camera-frame and image-plane quantities of every projected component."""

    means2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    depth: np.ndarray  # (K,)
    cam_means: np.ndarray  # (K, 3)
    cam_covs: np.ndarray  # (K, 3, 3)
    visible: np.ndarray  # (K,) bool, in front of the near plane


def project_splats(
    means: np.ndarray,
    covariances: np.ndarray,
    pose: RigidTransform,
    intr: CameraIntrinsics,
    z_near: float = RenderDefaults.Z_NEAR,
    floor: float = RenderDefaults.COV2D_FLOOR,
) -> ProjectedSplats:
    """Batched projection; ``pose`` maps world to camera coordinates."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    cam = act(pose, means)
    cam_covs = np.einsum("ij,kjl,ml->kim", pose.R, covariances, pose.R)
    z = cam[:, 2]
    visible = z > z_near
    safe_z = np.where(visible, z, 1.0)

    J = np.zeros((means.shape[0], 2, 3))
    J[:, 0, 0] = intr.fx / safe_z
    J[:, 0, 2] = -intr.fx * cam[:, 0] / safe_z**2
    J[:, 1, 1] = intr.fy / safe_z
    J[:, 1, 2] = -intr.fy * cam[:, 1] / safe_z**2
    cov2d = np.einsum("kai,kij,kbj->kab", J, cam_covs, J) + floor * np.eye(2)

    means2d = np.stack([intr.fx * cam[:, 0] / safe_z + intr.cx, intr.fy * cam[:, 1] / safe_z + intr.cy], axis=1)
    return ProjectedSplats(means2d, cov2d, z, cam, cam_covs, visible)


def project_gaussian(comp: GaussianComponent, pose: RigidTransform, intr: CameraIntrinsics) -> Optional[Tuple[np.ndarray, np.ndarray, float]]:
    """(mean2d, cov2d, depth) of one component, or None behind the near plane."""
    projected = project_splats(comp.spatial.m[None], comp.spatial.expected_covariance()[None], pose, intr)
    if not projected.visible[0]:
        return None
    return projected.means2d[0], projected.cov2d[0], float(projected.depth[0])


def splat_opacities(splat_map: SplatMap, opacity_gain: float = RenderDefaults.OPACITY_GAIN) -> np.ndarray:
    """clamp(gain * E[pi_k] * K, 0, MAX_OPACITY): unit gain and uniform weights give the cap."""
    return np.clip(opacity_gain * splat_map.expected_weights() * splat_map.size, 0.0, RenderDefaults.MAX_OPACITY)


# =============================================================================
# RASTERIZATION
# =============================================================================


def _footprint(mean2d: np.ndarray, cov2d: np.ndarray, intr: CameraIntrinsics):
    """Pixel box covering SIGMA_CUTOFF standard deviations, clipped to the image."""
    cutoff = RenderDefaults.SIGMA_CUTOFF
    ru = cutoff * math.sqrt(cov2d[0, 0])
    rv = cutoff * math.sqrt(cov2d[1, 1])
    u0 = max(int(math.floor(mean2d[0] - ru)), 0)
    u1 = min(int(math.ceil(mean2d[0] + ru)), intr.width - 1)
    v0 = max(int(math.floor(mean2d[1] - rv)), 0)
    v1 = min(int(math.ceil(mean2d[1] + rv)), intr.height - 1)
    if u0 > u1 or v0 > v1:
        return None
    return u0, u1, v0, v1


def rasterize(
    splat_map: SplatMap,
    pose: RigidTransform,
    intr: CameraIntrinsics,
    opacity_gain: float = RenderDefaults.OPACITY_GAIN,
    order: CompositingOrder = "front_to_back",
    depth_mode: DepthMode = "center",
) -> RenderedFrame:
    """Alpha-composite the map seen from ``pose`` (world to camera).

    Per pixel w_k = o_k exp(-1/2 d^T cov2d^-1 d), truncated at SIGMA_CUTOFF;
    color = sum c_k w_k prod_{j<k} (1 - w_j) and depth likewise. With
    ``depth_mode="ray"`` each splat contributes the depth of its density
    maximum along the pixel ray instead of its center depth.
    """
    if order not in ("front_to_back", "back_to_front"):
        raise ValueError(f"unknown compositing order '{order}'")
    if depth_mode not in ("center", "ray"):
        raise ValueError(f"unknown depth mode '{depth_mode}'")

    H, W = intr.height, intr.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    if splat_map.size == 0:
        return RenderedFrame(color, depth, np.zeros((H, W)))

    post = splat_map.posterior
    projected = project_splats(post.spatial.m, post.spatial.expected_covariance(), pose, intr)
    opacity = splat_opacities(splat_map, opacity_gain)
    colors = np.clip(post.color.m, 0.0, 1.0)

    candidates = np.flatnonzero(projected.visible & (opacity > 0))
    sequence = candidates[np.argsort(projected.depth[candidates], kind="stable")]
    if order == "back_to_front":
        sequence = sequence[::-1]

    max_power = -0.5 * RenderDefaults.SIGMA_CUTOFF**2
    transmittance = np.ones((H, W))
    accumulated = np.zeros((H, W))
    for k in sequence:
        box = _footprint(projected.means2d[k], projected.cov2d[k], intr)
        if box is None:
            continue
        u0, u1, v0, v1 = box
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1, dtype=np.float64), np.arange(v0, v1 + 1, dtype=np.float64))
        du = uu - projected.means2d[k, 0]
        dv = vv - projected.means2d[k, 1]
        conic = np.linalg.inv(projected.cov2d[k])
        power = -0.5 * (conic[0, 0] * du * du + 2.0 * conic[0, 1] * du * dv + conic[1, 1] * dv * dv)
        w = np.where(power >= max_power, opacity[k] * np.exp(power), 0.0)

        if depth_mode == "ray":
            z = _ray_depths(uu, vv, projected.cam_means[k], projected.cam_covs[k], intr)
        else:
            z = projected.depth[k]

        region = (slice(v0, v1 + 1), slice(u0, u1 + 1))
        if order == "front_to_back":
            contribution = transmittance[region] * w
            color[region] += contribution[..., None] * colors[k]
            depth[region] += contribution * z
            transmittance[region] *= 1.0 - w
        else:
            keep = 1.0 - w
            color[region] = w[..., None] * colors[k] + keep[..., None] * color[region]
            depth[region] = w * z + keep * depth[region]
            accumulated[region] = w + keep * accumulated[region]

    alpha = 1.0 - transmittance if order == "front_to_back" else accumulated
    return RenderedFrame(color, depth, alpha)


def _ray_depths(uu: np.ndarray, vv: np.ndarray, mean: np.ndarray, cov: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Depth of the density maximum along each pixel ray r = ((u-cx)/fx, (v-cy)/fy, 1)."""
    rays = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    precision = np.linalg.inv(cov + 1e-12 * np.eye(3))
    pr = rays @ precision
    t = (pr @ mean) / np.einsum("...i,...i->...", pr, rays)
    return np.maximum(t, RenderDefaults.Z_NEAR)


# =============================================================================
# METRICS
# =============================================================================


def psnr(image: np.ndarray, reference: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at PSNR_CAP; NaN for an empty mask."""
    diff = np.asarray(image, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    if mask is not None:
        diff = diff[mask]
    if diff.size == 0:
        return float("nan")
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return RenderDefaults.PSNR_CAP
    return min(RenderDefaults.PSNR_CAP, -10.0 * math.log10(mse))


def _luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return 255.0 * (0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2])


def ssim(image: np.ndarray, reference: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean structural similarity of the 8-bit-scaled luminance, over ``mask`` if given."""
    x = _luminance(image)
    y = _luminance(reference)
    blur = dict(sigma=RenderDefaults.SSIM_SIGMA, truncate=RenderDefaults.SSIM_RADIUS / RenderDefaults.SSIM_SIGMA)
    mu_x = gaussian_filter(x, **blur)
    mu_y = gaussian_filter(y, **blur)
    var_x = gaussian_filter(x * x, **blur) - mu_x * mu_x
    var_y = gaussian_filter(y * y, **blur) - mu_y * mu_y
    cov_xy = gaussian_filter(x * y, **blur) - mu_x * mu_y
    c1, c2 = RenderDefaults.SSIM_C1, RenderDefaults.SSIM_C2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    if mask is not None:
        if not np.any(mask):
            return float("nan")
        return float(ssim_map[mask].mean())
    return float(ssim_map.mean())


@dataclass
class RenderMetrics:
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    fps: Optional[float] = None

    def mean_psnr(self) -> Optional[float]:
        values = [v for v in self.psnr if np.isfinite(v)]
        return float(np.mean(values)) if values else None

    def mean_ssim(self) -> Optional[float]:
        values = [v for v in self.ssim if np.isfinite(v)]
        return float(np.mean(values)) if values else None


def render_metrics_pass(
    splat_map: SplatMap,
    poses: Sequence[RigidTransform],
    frames: Sequence[FrameObservation],
    intr: CameraIntrinsics,
    opacity_gain: float = RenderDefaults.OPACITY_GAIN,
) -> RenderMetrics:
    """Render every (world to camera) pose and score it against the frame's color image.

    Only pixels with alpha above ALPHA_VALID are scored. FPS counts rendering
    time only.
    """
    if len(poses) != len(frames):
        raise ValueError(f"{len(poses)} poses for {len(frames)} frames")
    metrics = RenderMetrics()
    elapsed = 0.0
    for pose, frame in zip(poses, frames):
        start = time.perf_counter()
        rendered = rasterize(splat_map, pose, intr, opacity_gain)
        elapsed += time.perf_counter() - start
        reference = color_to_unit(frame.color)
        mask = rendered.alpha > RenderDefaults.ALPHA_VALID
        metrics.psnr.append(psnr(rendered.color, reference, mask))
        metrics.ssim.append(ssim(rendered.color, reference, mask))
    if frames and elapsed > 0:
        metrics.fps = len(frames) / elapsed
    logger.info("rendered %d views, mean PSNR %s", len(frames), metrics.mean_psnr())
    return metrics


# =============================================================================
# PNG OUTPUT
# =============================================================================


def write_png_color(path: str, color: np.ndarray) -> None:
    """8-bit PNG of a [0, 1] RGB image."""
    if not cv2.imwrite(path, cv2.cvtColor(unit_to_color(color), cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def write_png_depth(path: str, depth: np.ndarray) -> None:
    """16-bit PNG of metric depth in millimeters."""
    if not cv2.imwrite(path, meters_to_depth(depth, RenderDefaults.PNG_DEPTH_SCALE)):
        raise OSError(f"could not write {path}")
