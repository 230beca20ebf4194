"""
Sensor-data ingestion: back-projection of RGB-D frames into point batches,
voxel-grid downsampling, and dataset readers for the TUM-RGBD folder layout
(also used by the simulator's native format).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import DatasetError, DimensionMismatch, MissingIndexFile, NoAssociation
from .evaluation import read_tum_trajectory
from .lie import RigidTransform, act
from .units import color_to_unit, depth_to_meters

logger = logging.getLogger(__name__)


class FrontendDefaults:
    """Sampling and sensor defaults."""

    TRACK_STRIDE = 4
    KEYFRAME_STRIDE = 2
    INIT_VOXEL = 0.02  # m
    INSERT_VOXEL = 0.03  # m
    DEPTH_MIN = 0.1  # m
    DEPTH_MAX = 8.0  # m
    MAX_DT = 0.02  # s, rgb/depth/groundtruth association window

    # TUM-RGBD depth PNGs store 5000 codes per meter
    TUM_DEPTH_SCALE = 5000.0

    # Freiburg 1 color camera
    TUM_INTRINSICS = {"fx": 517.3, "fy": 516.5, "cx": 318.6, "cy": 255.3, "width": 640, "height": 480}

    INTRINSICS_FILE = "intrinsics.txt"


# =============================================================================
# DATA TYPES
# =============================================================================


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the raw depth code scale."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = FrontendDefaults.TUM_DEPTH_SCALE

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")
        if self.depth_scale <= 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    @classmethod
    def tum_default(cls) -> "CameraIntrinsics":
        return cls(**FrontendDefaults.TUM_INTRINSICS, depth_scale=FrontendDefaults.TUM_DEPTH_SCALE)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to pixel coordinates (N, 2)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        z = points[:, 2]
        return np.stack([self.fx * points[:, 0] / z + self.cx, self.fy * points[:, 1] / z + self.cy], axis=1)

    def to_dict(self) -> Dict[str, float]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "depth_scale": self.depth_scale,
        }


@dataclass
class FrameObservation:
    """One RGB-D pair. ``color`` is RGB, 8 bits per channel; ``depth`` holds raw sensor codes."""

    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    issues: List[str] = field(default_factory=list)

    @classmethod
    def create(cls, timestamp: float, color: np.ndarray, depth: np.ndarray) -> "FrameObservation":
        """Build a frame whose validity mask marks finite, positive depth."""
        depth = np.asarray(depth)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(timestamp=float(timestamp), color=np.asarray(color), depth=depth, valid_mask=valid)

    def check_dimensions(self, intr: CameraIntrinsics) -> None:
        expected = (intr.height, intr.width)
        if self.depth.shape != expected or self.color.shape[:2] != expected or self.valid_mask.shape != expected:
            raise DimensionMismatch(f"frame at t={self.timestamp:.6f} has color {self.color.shape} / depth {self.depth.shape}, intrinsics expect {expected}")


@dataclass(frozen=True)
class PointBatch:
    """Camera-frame (or world-frame, once transformed) points with their colors."""

    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    pixel_indices: np.ndarray  # (N, 2) integer (u, v)

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        pixels = np.asarray(self.pixel_indices, dtype=np.int64).reshape(-1, 2)
        if not (positions.shape[0] == colors.shape[0] == pixels.shape[0]):
            raise DimensionMismatch(f"point batch arrays disagree: {positions.shape[0]} positions, {colors.shape[0]} colors, {pixels.shape[0]} pixels")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "pixel_indices", pixels)

    @classmethod
    def empty(cls) -> "PointBatch":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_arrays(cls, positions: np.ndarray, colors: Optional[np.ndarray] = None) -> "PointBatch":
        """Batch without pixel provenance; colors default to mid-grey."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if colors is None:
            colors = np.full(positions.shape, 0.5)
        return cls(positions, colors, np.full((positions.shape[0], 2), -1, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def count(self) -> int:
        return len(self)

    def subset(self, selector: np.ndarray) -> "PointBatch":
        return PointBatch(self.positions[selector], self.colors[selector], self.pixel_indices[selector])

    def transformed(self, T: RigidTransform) -> "PointBatch":
        """The same points with positions mapped through T."""
        if len(self) == 0:
            return self
        return PointBatch(act(T, self.positions), self.colors, self.pixel_indices)

    def concat(self, other: "PointBatch") -> "PointBatch":
        return PointBatch(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.pixel_indices, other.pixel_indices]),
        )


# =============================================================================
# BACK-PROJECTION AND DOWNSAMPLING
# =============================================================================


def backproject(
    frame: FrameObservation,
    intr: CameraIntrinsics,
    stride: int = 1,
    depth_range: Tuple[float, float] = (FrontendDefaults.DEPTH_MIN, FrontendDefaults.DEPTH_MAX),
) -> PointBatch:
    """Lift every valid pixel on the stride grid to a camera-frame point."""
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    frame.check_dimensions(intr)

    vs, us = np.mgrid[0 : intr.height : stride, 0 : intr.width : stride]
    depth = depth_to_meters(frame.depth[::stride, ::stride], intr.depth_scale)
    valid = frame.valid_mask[::stride, ::stride] & np.isfinite(depth) & (depth >= depth_range[0]) & (depth <= depth_range[1])

    d = depth[valid]
    u = us[valid]
    v = vs[valid]
    positions = np.stack([d * (u - intr.cx) / intr.fx, d * (v - intr.cy) / intr.fy, d], axis=1)
    colors = color_to_unit(frame.color[::stride, ::stride][valid])
    return PointBatch(positions, colors, np.stack([u, v], axis=1))


def voxel_downsample(batch: PointBatch, voxel: float) -> PointBatch:
    """One centroid per occupied voxel, ordered by ascending voxel key."""
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(batch) == 0:
        return batch

    keys = np.floor(batch.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_voxels = counts.shape[0]

    positions = np.stack([np.bincount(inverse, weights=batch.positions[:, i], minlength=n_voxels) for i in range(3)], axis=1) / counts[:, None]
    colors = np.stack([np.bincount(inverse, weights=batch.colors[:, i], minlength=n_voxels) for i in range(3)], axis=1) / counts[:, None]

    # Lowest original index represents the voxel's pixel
    order = np.argsort(inverse, kind="stable")
    first = order[np.concatenate([[0], np.cumsum(counts)[:-1]])]
    return PointBatch(positions, colors, batch.pixel_indices[first])


# =============================================================================
# DATASET READERS
# =============================================================================


def read_index_file(path: str) -> List[Tuple[float, str]]:
    """Parse a 'timestamp filename' list, skipping '#' comments and blank lines."""
    entries = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DatasetError(f"{path}:{line_no}: expected 'timestamp filename'")
            try:
                entries.append((float(parts[0]), parts[1]))
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: bad timestamp '{parts[0]}'") from None
    entries.sort(key=lambda entry: entry[0])
    return entries


def read_intrinsics_file(path: str) -> CameraIntrinsics:
    """Read a key=value intrinsics file (fx, fy, cx, cy, width, height, depth_scale)."""
    values: Dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{line_no}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                values[key] = float(value)
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: '{value}' is not a number") from None
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(values)
    if missing:
        raise DatasetError(f"{path}: missing intrinsics {', '.join(sorted(missing))}")
    return CameraIntrinsics(
        fx=values["fx"],
        fy=values["fy"],
        cx=values["cx"],
        cy=values["cy"],
        width=int(values["width"]),
        height=int(values["height"]),
        depth_scale=values.get("depth_scale", FrontendDefaults.TUM_DEPTH_SCALE),
    )


def write_intrinsics_file(path: str, intr: CameraIntrinsics) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in intr.to_dict().items():
            handle.write(f"{key}={value}\n")


def nearest_timestamp(times: np.ndarray, t: float, max_dt: float) -> Optional[int]:
    """Index of the entry in sorted ``times`` closest to t, or None beyond max_dt."""
    if times.size == 0:
        return None
    i = int(np.searchsorted(times, t))
    candidates = [j for j in (i - 1, i) if 0 <= j < times.size]
    best = min(candidates, key=lambda j: abs(times[j] - t))
    if abs(times[best] - t) > max_dt:
        return None
    return best


def read_color(path: str) -> np.ndarray:
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"cannot read color image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_depth(path: str) -> np.ndarray:
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"cannot read depth image {path}")
    if image.ndim != 2:
        raise DatasetError(f"depth image {path} has {image.shape[2]} channels, expected 1")
    return image


@dataclass
class SequenceIndex:
    """Associated frames of a dataset folder, resolved before any image is decoded."""

    root: str
    intrinsics: CameraIntrinsics
    entries: List[Tuple[float, str, str, Optional[RigidTransform]]]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def frames(self, limit: Optional[int] = None) -> Iterator[Tuple[FrameObservation, Optional[RigidTransform]]]:
        """Decode frames in timestamp order; ground truth is camera-to-world."""
        for i, (timestamp, rgb_name, depth_name, truth) in enumerate(self.entries):
            if limit is not None and i >= limit:
                return
            color = read_color(os.path.join(self.root, rgb_name))
            depth = read_depth(os.path.join(self.root, depth_name))
            yield FrameObservation.create(timestamp, color, depth), truth


def index_tum_sequence(path: str, max_dt: float = FrontendDefaults.MAX_DT, intrinsics: Optional[CameraIntrinsics] = None) -> SequenceIndex:
    """Associate rgb.txt, depth.txt and (optionally) groundtruth.txt entries."""
    if not os.path.isdir(path):
        raise DatasetError(f"dataset directory {path} does not exist")
    for name in ("rgb.txt", "depth.txt"):
        if not os.path.isfile(os.path.join(path, name)):
            raise MissingIndexFile(name, path)

    intrinsics_path = os.path.join(path, FrontendDefaults.INTRINSICS_FILE)
    if intrinsics is None:
        intrinsics = read_intrinsics_file(intrinsics_path) if os.path.isfile(intrinsics_path) else CameraIntrinsics.tum_default()

    rgb = read_index_file(os.path.join(path, "rgb.txt"))
    depth = read_index_file(os.path.join(path, "depth.txt"))
    depth_times = np.array([t for t, _ in depth])

    truth_times = np.zeros(0)
    truth_poses: Sequence[RigidTransform] = []
    truth_path = os.path.join(path, "groundtruth.txt")
    if os.path.isfile(truth_path):
        truth = read_tum_trajectory(truth_path)
        truth_times = truth.timestamps
        truth_poses = truth.poses

    entries = []
    dropped = 0
    for timestamp, rgb_name in rgb:
        j = nearest_timestamp(depth_times, timestamp, max_dt)
        if j is None:
            dropped += 1
            continue
        g = nearest_timestamp(truth_times, timestamp, max_dt)
        entries.append((timestamp, rgb_name, depth[j][1], truth_poses[g] if g is not None else None))

    if rgb and not entries:
        raise NoAssociation(f"none of the {len(rgb)} color frames in {path} has a depth image within {max_dt:.3f} s")
    if dropped:
        logger.warning("%d of %d color frames in %s have no depth within %.3f s and were skipped", dropped, len(rgb), path, max_dt)
    logger.info("indexed %d frames from %s", len(entries), path)
    return SequenceIndex(root=path, intrinsics=intrinsics, entries=entries, dropped=dropped)


def load_tum_sequence(
    path: str, max_dt: float = FrontendDefaults.MAX_DT, intrinsics: Optional[CameraIntrinsics] = None
) -> Iterator[Tuple[FrameObservation, Optional[RigidTransform]]]:
    """Stream associated (frame, ground truth) pairs; index files are checked before returning."""
    return index_tum_sequence(path, max_dt, intrinsics).frames()
