"""
Synthetic scenes and RGB-D sequences with exact ground truth.

Scenes are sets of textured rectangles covered by flat Gaussian components.
Frames are rendered from the ground-truth map with the same rasterizer used for
evaluation, so the generative model is exactly realizable.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np

from .evaluation import Trajectory, write_tum_trajectory
from .frontend import CameraIntrinsics, FrameObservation, write_intrinsics_file
from .lie import RigidTransform, exp_se3
from .render import rasterize
from .splatmap import MixtureParams, NiwPosterior, SplatMap
from .units import meters_to_depth, unit_to_color

logger = logging.getLogger(__name__)

Preset = Literal["textured_plane", "box_room", "cluttered_table"]
TrajectoryKind = Literal["orbit", "lissajous", "line"]


class SimDefaults:
    """Camera, surface and texture parameters of generated data."""

    WIDTH = 160
    HEIGHT = 120
    FX = 140.0
    FY = 140.0
    CX = 79.5
    CY = 59.5
    DEPTH_SCALE = 1000.0  # mm codes

    NORMAL_SIGMA = 0.005  # m
    # Tangent sigma as a fraction of the grid spacing
    TANGENT_FACTOR = 0.55

    # Ground-truth components are nearly certain
    GT_KAPPA = 1e6
    GT_NU = 1e6
    GT_COLOR_VARIANCE = 1e-4
    GT_ALPHA = 1.0

    CHECKER = 0.25  # m
    TEXTURE_AMPLITUDE = 0.08
    TEXTURE_WAVES = 3

    DENSITY = {"textured_plane": 400.0, "box_room": 100.0, "cluttered_table": 400.0}

    FRAME_RATE = 30.0  # Hz
    FRAMES = 200

    ODOMETRY_TRANSLATION_NOISE = 0.002  # m per frame
    ODOMETRY_ROTATION_NOISE = 0.002  # rad per frame


def sim_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(SimDefaults.FX, SimDefaults.FY, SimDefaults.CX, SimDefaults.CY, SimDefaults.WIDTH, SimDefaults.HEIGHT, SimDefaults.DEPTH_SCALE)


# =============================================================================
# SCENES
# =============================================================================


@dataclass(frozen=True)
class Surface:
    """A rectangle centered at ``center`` spanned by unit axes u, v with side lengths (width, height)."""

    center: Tuple[float, float, float]
    u: Tuple[float, float, float]
    v: Tuple[float, float, float]
    width: float
    height: float
    colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]]


@dataclass
class SyntheticScene:
    preset: str
    seed: int
    density: float
    gt_map: SplatMap
    bounds: np.ndarray  # (2, 3) min and max corner
    surfaces: List[Surface] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.gt_map.size


_WARM = (0.85, 0.55, 0.35)
_COOL = (0.25, 0.45, 0.75)
_LIGHT = (0.9, 0.9, 0.85)
_DARK = (0.2, 0.22, 0.25)
_GREEN = (0.35, 0.7, 0.4)


def _preset_surfaces(preset: str, rng: np.random.Generator) -> Tuple[List[Surface], np.ndarray]:
    X, Y, Z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    if preset == "textured_plane":
        surfaces = [Surface((0.0, 0.0, 0.0), X, Y, 2.0, 2.0, (_WARM, _COOL))]
        return surfaces, np.array([[-1.0, -1.0, 0.0], [1.0, 1.0, 0.0]])

    if preset == "box_room":
        hx, hy, h = 1.0, 1.0, 1.5
        surfaces = [
            Surface((0.0, 0.0, 0.0), X, Y, 2 * hx, 2 * hy, (_LIGHT, _DARK)),
            Surface((0.0, 0.0, h), X, Y, 2 * hx, 2 * hy, (_LIGHT, _COOL)),
            Surface((hx, 0.0, h / 2), Y, Z, 2 * hy, h, (_WARM, _LIGHT)),
            Surface((-hx, 0.0, h / 2), Y, Z, 2 * hy, h, (_COOL, _LIGHT)),
            Surface((0.0, hy, h / 2), X, Z, 2 * hx, h, (_GREEN, _DARK)),
            Surface((0.0, -hy, h / 2), X, Z, 2 * hx, h, (_WARM, _DARK)),
        ]
        return surfaces, np.array([[-hx, -hy, 0.0], [hx, hy, h]])

    if preset == "cluttered_table":
        surfaces = [Surface((0.0, 0.0, 0.0), X, Y, 1.2, 0.8, (_LIGHT, _DARK))]
        palette = [_WARM, _COOL, _GREEN]
        for i in range(3):
            cx, cy = rng.uniform(-0.4, 0.4), rng.uniform(-0.25, 0.25)
            s = float(rng.uniform(0.12, 0.2))
            top = rng.uniform(0.08, 0.2)
            pair = (palette[i], _LIGHT)
            surfaces += [
                Surface((cx, cy, top), X, Y, s, s, pair),
                Surface((cx + s / 2, cy, top / 2), Y, Z, s, top, pair),
                Surface((cx - s / 2, cy, top / 2), Y, Z, s, top, pair),
                Surface((cx, cy + s / 2, top / 2), X, Z, s, top, pair),
                Surface((cx, cy - s / 2, top / 2), X, Z, s, top, pair),
            ]
        return surfaces, np.array([[-0.6, -0.4, 0.0], [0.6, 0.4, 0.2]])

    raise ValueError(f"unknown scene preset '{preset}' (expected textured_plane, box_room or cluttered_table)")


def _texture(a: np.ndarray, b: np.ndarray, colors, phases: np.ndarray) -> np.ndarray:
    """Checkerboard of the two colors with low-frequency sinusoidal variation."""
    parity = (np.floor(a / SimDefaults.CHECKER) + np.floor(b / SimDefaults.CHECKER)).astype(np.int64) % 2
    base = np.where(parity[:, None] == 0, np.array(colors[0]), np.array(colors[1]))
    wave = np.zeros_like(a)
    for i, (pa, pb, pc) in enumerate(phases):
        frequency = (i + 1) * 1.3
        wave += np.sin(frequency * a + pa) * np.cos(frequency * b + pb) + 0.5 * np.sin(pc)
    wave /= max(len(phases), 1)
    return np.clip(base + SimDefaults.TEXTURE_AMPLITUDE * wave[:, None], 0.02, 0.98)


def _sample_surface(surface: Surface, density: float, phases: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = np.asarray(surface.u, dtype=np.float64)
    v = np.asarray(surface.v, dtype=np.float64)
    n = np.cross(u, v)
    nu = max(1, int(round(surface.width * math.sqrt(density))))
    nv = max(1, int(round(surface.height * math.sqrt(density))))
    a = ((np.arange(nu) + 0.5) / nu - 0.5) * surface.width
    b = ((np.arange(nv) + 0.5) / nv - 0.5) * surface.height
    aa, bb = np.meshgrid(a, b, indexing="ij")
    aa, bb = aa.reshape(-1), bb.reshape(-1)
    positions = np.asarray(surface.center) + aa[:, None] * u + bb[:, None] * v

    su = SimDefaults.TANGENT_FACTOR * surface.width / nu
    sv = SimDefaults.TANGENT_FACTOR * surface.height / nv
    cov = su**2 * np.outer(u, u) + sv**2 * np.outer(v, v) + SimDefaults.NORMAL_SIGMA**2 * np.outer(n, n)
    covs = np.broadcast_to(cov, (positions.shape[0], 3, 3)).copy()

    # Texture coordinates are world-anchored so adjacent surfaces line up
    world_a = positions @ u
    world_b = positions @ v
    colors = _texture(world_a, world_b, surface.colors, phases)
    return positions, covs, colors


def ground_truth_map(positions: np.ndarray, covariances: np.ndarray, colors: np.ndarray) -> SplatMap:
    """A map whose expected covariances equal ``covariances`` and whose weights are uniform."""
    K = positions.shape[0]
    d = 3
    spatial = NiwPosterior(positions, np.full(K, SimDefaults.GT_KAPPA), covariances * (SimDefaults.GT_NU - d - 1), np.full(K, SimDefaults.GT_NU))
    color = NiwPosterior.broadcast(colors, SimDefaults.GT_KAPPA, SimDefaults.GT_COLOR_VARIANCE * (SimDefaults.GT_NU - d - 1) * np.eye(3), SimDefaults.GT_NU)
    params = MixtureParams(spatial, color, np.full(K, SimDefaults.GT_ALPHA))
    return SplatMap.from_params(params, alpha_prior=SimDefaults.GT_ALPHA)


def make_scene(preset: Preset = "textured_plane", seed: int = 0, density: Optional[float] = None) -> SyntheticScene:
    """Deterministic ground-truth scene; ``density`` is components per square meter of surface."""
    density = SimDefaults.DENSITY.get(preset, 100.0) if density is None else float(density)
    if density <= 0:
        raise ValueError(f"density must be positive, got {density}")
    rng = np.random.default_rng(seed)
    surfaces, bounds = _preset_surfaces(preset, rng)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(SimDefaults.TEXTURE_WAVES, 3))

    samples = [_sample_surface(surface, density, phases) for surface in surfaces]
    positions = np.concatenate([s[0] for s in samples])
    covariances = np.concatenate([s[1] for s in samples])
    colors = np.concatenate([s[2] for s in samples])
    gt_map = ground_truth_map(positions, covariances, colors)
    logger.info("scene %s (seed %d): %d components", preset, seed, gt_map.size)
    return SyntheticScene(preset, seed, density, gt_map, bounds, surfaces)


# =============================================================================
# TRAJECTORIES
# =============================================================================


@dataclass(frozen=True)
class TrajectorySpec:
    """Analytic camera path; every pose looks at ``look_at``.

    orbit:     center + (a_x cos(w t), a_y sin(w t), a_z sin(w_z t))
    lissajous: center + (a_x sin(w_x t), a_y sin(w_y t), a_z sin(w_z t))
    line:      center + amplitudes * t / duration
    """

    kind: TrajectoryKind = "orbit"
    amplitudes: Tuple[float, float, float] = (0.3, 0.3, 0.05)
    angular_rates: Tuple[float, float, float] = (0.5, 0.5, 1.0)  # rad/s
    duration: float = SimDefaults.FRAMES / SimDefaults.FRAME_RATE  # s
    frame_rate: float = SimDefaults.FRAME_RATE  # Hz
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: Tuple[float, float, float] = (0.0, 0.0, 1.2)
    up: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("orbit", "lissajous", "line"):
            raise ValueError(f"unknown trajectory kind '{self.kind}'")
        if self.frame_rate <= 0:
            raise ValueError(f"frame rate must be positive, got {self.frame_rate}")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")

    @property
    def frame_count(self) -> int:
        return int(math.floor(self.duration * self.frame_rate + 1e-9))


def look_at(position: np.ndarray, target: np.ndarray, up: Sequence[float] = (0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose at ``position`` with z toward ``target`` and y pointing down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with its target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Looking along the up vector; any perpendicular works
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidTransform(np.stack([right, down, forward], axis=1), position)


def camera_position(spec: TrajectorySpec, t: float) -> np.ndarray:
    a = np.asarray(spec.amplitudes, dtype=np.float64)
    w = np.asarray(spec.angular_rates, dtype=np.float64)
    center = np.asarray(spec.center, dtype=np.float64)
    if spec.kind == "orbit":
        offset = np.array([a[0] * math.cos(w[0] * t), a[1] * math.sin(w[0] * t), a[2] * math.sin(w[2] * t)])
    elif spec.kind == "lissajous":
        offset = a * np.sin(w * t)
    else:
        offset = a * (t / spec.duration)
    return center + offset


def trajectory_poses(spec: TrajectorySpec) -> Trajectory:
    """Ground-truth camera-to-world poses at t = i / frame_rate."""
    times = np.arange(spec.frame_count) / spec.frame_rate
    poses = [look_at(camera_position(spec, float(t)), np.asarray(spec.look_at), np.asarray(spec.up)) for t in times]
    return Trajectory(times, poses)


def default_trajectory(preset: str, frames: int = SimDefaults.FRAMES, frame_rate: float = SimDefaults.FRAME_RATE) -> TrajectorySpec:
    """A path that keeps the preset's surfaces in view."""
    duration = frames / frame_rate
    if preset == "box_room":
        # One slow turn inside the room, looking across it
        rate = 2.0 * math.pi / duration
        return TrajectorySpec("orbit", (0.25, 0.25, 0.05), (rate, rate, 2.0 * rate), duration, frame_rate, (0.0, 0.0, 0.75), (0.0, 0.0, 0.75), (0.0, 0.0, 1.0))
    if preset == "cluttered_table":
        rate = 0.5 * math.pi / duration
        return TrajectorySpec("orbit", (0.9, 0.9, 0.05), (rate, rate, 2.0 * rate), duration, frame_rate, (0.0, 0.0, 0.05), (0.0, 0.0, 0.7), (0.0, 0.0, 1.0))
    rate = 2.0 * math.pi / max(duration, 1e-9)
    return TrajectorySpec("orbit", (0.25, 0.25, 0.05), (rate, rate, rate), duration, frame_rate, (0.0, 0.0, 0.0), (0.0, 0.0, 1.2), (0.0, 1.0, 0.0))


# =============================================================================
# FRAMES
# =============================================================================


@dataclass(frozen=True)
class SensorNoise:
    depth_sigma: float = 0.0  # m
    color_sigma: float = 0.0  # in [0, 1] units


def add_sensor_noise(depth: np.ndarray, color: np.ndarray, noise: SensorNoise, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Additive Gaussian noise on valid (positive) depth and on every color channel."""
    depth = depth.copy()
    color = color.copy()
    if noise.depth_sigma > 0:
        perturbation = rng.normal(0.0, noise.depth_sigma, size=depth.shape)
        valid = depth > 0
        depth[valid] = np.maximum(depth[valid] + perturbation[valid], 1e-3)
    if noise.color_sigma > 0:
        color = np.clip(color + rng.normal(0.0, noise.color_sigma, size=color.shape), 0.0, 1.0)
    return depth, color


def render_observation(scene: SyntheticScene, pose_wc: RigidTransform, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Noiseless (color in [0, 1], metric depth) seen from a camera-to-world pose."""
    rendered = rasterize(scene.gt_map, pose_wc.inverse(), intr, depth_mode="ray")
    return rendered.color, rendered.normalized_depth()


def synthesize_frames(
    scene: SyntheticScene,
    traj: TrajectorySpec,
    intr: Optional[CameraIntrinsics] = None,
    noise: SensorNoise = SensorNoise(),
    seed: int = 0,
) -> Iterator[Tuple[FrameObservation, RigidTransform]]:
    """Lazily render (frame, camera-to-world ground truth) pairs along ``traj``.

    Depth is quantized to the intrinsics' depth scale, exactly as it would be
    stored on disk.
    """
    intr = intr or sim_intrinsics()
    rng = np.random.default_rng(seed)
    truth = trajectory_poses(traj)
    for timestamp, pose in zip(truth.timestamps, truth.poses):
        color, depth = render_observation(scene, pose, intr)
        depth, color = add_sensor_noise(depth, color, noise, rng)
        yield FrameObservation.create(float(timestamp), unit_to_color(color), meters_to_depth(depth, intr.depth_scale)), pose


def noisy_odometry(poses_wc: Sequence[RigidTransform], translation_sigma: float, rotation_sigma: float, seed: int = 0) -> List[RigidTransform]:
    """Relative world-to-camera motions T_t T_{t-1}^-1 perturbed by random twists; the first entry is identity."""
    rng = np.random.default_rng(seed)
    relative = [RigidTransform.identity()]
    for previous, current in zip(poses_wc[:-1], poses_wc[1:]):
        motion = current.inverse() @ previous
        noise = np.concatenate([rng.normal(0.0, translation_sigma, 3), rng.normal(0.0, rotation_sigma, 3)])
        relative.append(exp_se3(noise) @ motion)
    return relative


# =============================================================================
# ON-DISK FORMAT
# =============================================================================


def _stamp(t: float) -> str:
    return format(float(t), ".17g")


def write_dataset(directory: str, frames: Iterable[Tuple[FrameObservation, RigidTransform]], intr: CameraIntrinsics) -> int:
    """Write frames in the TUM folder layout plus intrinsics.txt; returns the frame count."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    write_intrinsics_file(os.path.join(directory, "intrinsics.txt"), intr)

    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth images", "# timestamp filename"]
    times, poses = [], []
    for i, (frame, pose) in enumerate(frames):
        name = f"{i:06d}.png"
        if not cv2.imwrite(os.path.join(directory, "rgb", name), cv2.cvtColor(frame.color, cv2.COLOR_RGB2BGR)):
            raise OSError(f"could not write rgb/{name}")
        if not cv2.imwrite(os.path.join(directory, "depth", name), frame.depth.astype(np.uint16)):
            raise OSError(f"could not write depth/{name}")
        rgb_lines.append(f"{_stamp(frame.timestamp)} rgb/{name}")
        depth_lines.append(f"{_stamp(frame.timestamp)} depth/{name}")
        times.append(frame.timestamp)
        poses.append(pose)

    with open(os.path.join(directory, "rgb.txt"), "w", encoding="utf-8") as handle:
        handle.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w", encoding="utf-8") as handle:
        handle.write("\n".join(depth_lines) + "\n")
    write_tum_trajectory(os.path.join(directory, "groundtruth.txt"), Trajectory(np.array(times), poses), "ground truth, camera to world")
    logger.info("wrote %d frames to %s", len(times), directory)
    return len(times)

