"""
Trajectory metrics and run reports.

Trajectories hold camera-to-world poses, the convention of TUM-format files.
ATE is the RMSE of translational residuals after a rigid (scale-free)
alignment of the estimate onto the ground truth.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import TooFewPairs, TrajectoryFormatError
from .lie import RigidTransform
from .units import format_db, format_fps, format_length_cm, meters_to_cm

logger = logging.getLogger(__name__)


class EvalDefaults:
    MAX_DT = 0.02  # s
    MIN_PAIRS = 3


# =============================================================================
# TRAJECTORIES
# =============================================================================


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses with strictly increasing timestamps."""

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    poses: List[RigidTransform] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.poses = list(self.poses)
        if self.timestamps.shape[0] != len(self.poses):
            raise ValueError(f"{self.timestamps.shape[0]} timestamps for {len(self.poses)} poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Iterable[Tuple[float, RigidTransform]]) -> "Trajectory":
        samples = list(samples)
        return cls(np.array([s[0] for s in samples], dtype=np.float64), [s[1] for s in samples])

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([T.t for T in self.poses])

    def transformed(self, T: RigidTransform) -> "Trajectory":
        """Every pose left-multiplied by T (a change of world frame)."""
        return Trajectory(self.timestamps.copy(), [T @ P for P in self.poses])


def _parse_line(text: str, number: int, path: Optional[str]) -> Optional[Tuple[float, RigidTransform]]:
    stripped = text.strip()
    if not stripped or stripped.startswith("#"):
        return None
    parts = stripped.replace(",", " ").split()
    if len(parts) != 8:
        raise TrajectoryFormatError(number, f"expected 8 fields (timestamp tx ty tz qx qy qz qw), got {len(parts)}", path)
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise TrajectoryFormatError(number, f"non-numeric field in '{stripped}'", path) from None
    if not np.all(np.isfinite(values)):
        raise TrajectoryFormatError(number, "non-finite value", path)
    quaternion = np.array(values[4:8])
    norm = np.linalg.norm(quaternion)
    if norm < 1e-12:
        raise TrajectoryFormatError(number, "zero quaternion", path)
    R = Rotation.from_quat(quaternion / norm).as_matrix()
    return values[0], RigidTransform(R, values[1:4])


def read_tum_trajectory(path: str) -> Trajectory:
    """Parse 'timestamp tx ty tz qx qy qz qw' lines; '#' starts a comment line."""
    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, text in enumerate(handle, start=1):
            sample = _parse_line(text, number, path)
            if sample is None:
                continue
            if samples and sample[0] <= samples[-1][0]:
                raise TrajectoryFormatError(number, f"timestamp {sample[0]!r} does not increase", path)
            samples.append(sample)
    return Trajectory.from_samples(samples)


def format_tum_line(timestamp: float, pose: RigidTransform) -> str:
    qx, qy, qz, qw = Rotation.from_matrix(pose.R).as_quat()
    values = [timestamp, *pose.t, qx, qy, qz, qw]
    return " ".join(format(float(v), ".17g") for v in values)


def write_tum_trajectory(path: str, trajectory: Trajectory, header: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# {header or 'timestamp tx ty tz qx qy qz qw'}\n")
        for timestamp, pose in zip(trajectory.timestamps, trajectory.poses):
            handle.write(format_tum_line(timestamp, pose) + "\n")


# =============================================================================
# ALIGNMENT AND ATE
# =============================================================================


def associate(first: np.ndarray, second: np.ndarray, max_dt: float = EvalDefaults.MAX_DT) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching of timestamps, closest pairs first, within max_dt.

    Returns index pairs sorted by the first sequence.
    """
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if first.size == 0 or second.size == 0:
        return []
    right = np.searchsorted(second, first)
    candidates = []
    for i, j in enumerate(right):
        for k in (j - 1, j, j + 1):
            if 0 <= k < second.size:
                dt = abs(first[i] - second[k])
                if dt <= max_dt:
                    candidates.append((dt, i, int(k)))
    candidates.sort()
    used_first, used_second = set(), set()
    pairs = []
    for _, i, k in candidates:
        if i in used_first or k in used_second:
            continue
        used_first.add(i)
        used_second.add(k)
        pairs.append((i, k))
    pairs.sort()
    return pairs


def associated_positions(estimate: Trajectory, truth: Trajectory, max_dt: float) -> Tuple[np.ndarray, np.ndarray]:
    pairs = associate(estimate.timestamps, truth.timestamps, max_dt)
    if len(pairs) < EvalDefaults.MIN_PAIRS:
        raise TooFewPairs(len(pairs), EvalDefaults.MIN_PAIRS)
    est = estimate.positions[[i for i, _ in pairs]]
    ref = truth.positions[[j for _, j in pairs]]
    return est, ref


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Rigid transform minimizing sum ||target_i - (R source_i + t)||^2."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    W = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform(R, mu_t - R @ mu_s)


def umeyama_align(estimate: Trajectory, truth: Trajectory, max_dt: float = EvalDefaults.MAX_DT) -> RigidTransform:
    """Rigid alignment (no scale) of the estimated positions onto the truth."""
    est, ref = associated_positions(estimate, truth, max_dt)
    return kabsch(est, ref)


def alignment_residuals(estimate: Trajectory, truth: Trajectory, max_dt: float = EvalDefaults.MAX_DT) -> np.ndarray:
    """Per-pair translational error norms (meters) after alignment."""
    est, ref = associated_positions(estimate, truth, max_dt)
    T = kabsch(est, ref)
    return np.linalg.norm(ref - (est @ T.R.T + T.t), axis=1)


def ate_rmse(estimate: Trajectory, truth: Trajectory, max_dt: float = EvalDefaults.MAX_DT) -> float:
    """Absolute trajectory error in centimeters."""
    residuals = alignment_residuals(estimate, truth, max_dt)
    return meters_to_cm(float(np.sqrt(np.mean(residuals**2))))


# =============================================================================
# REPORTS
# =============================================================================


@dataclass
class RunSummary:
    """Aggregate metrics of one run; None marks a metric that was not computed."""

    frames: int = 0
    keyframes: int = 0
    ate_cm: Optional[float] = None
    ate_pairs: int = 0
    mean_psnr: Optional[float] = None
    mean_ssim: Optional[float] = None
    tracking_fps: Optional[float] = None
    render_fps: Optional[float] = None
    peak_components: int = 0
    final_components: int = 0
    diverged_frames: int = 0


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g") if np.isfinite(value) else ""
    return str(value)


def write_report(summary: RunSummary, directory: str) -> Tuple[str, str]:
    """Write report.csv (one header row, one value row) and report.txt."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, "report.csv")
    txt_path = os.path.join(directory, "report.txt")

    names = [f.name for f in fields(summary)]
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        writer.writerow([_csv_value(getattr(summary, name)) for name in names])

    ate = format_length_cm(summary.ate_cm / 100.0 if summary.ate_cm is not None else None)
    lines = [
        "Run report",
        "==========",
        f"Frames processed:     {summary.frames}",
        f"Keyframes:            {summary.keyframes}",
        f"ATE (RMSE):           {ate or 'n/a'} over {summary.ate_pairs} pairs",
        f"Mean PSNR:            {format_db(summary.mean_psnr) or 'n/a'}",
        f"Mean SSIM:            {format(summary.mean_ssim, '.4f') if summary.mean_ssim is not None else 'n/a'}",
        f"Tracking FPS:         {format_fps(summary.tracking_fps) or 'n/a'}",
        f"Render FPS:           {format_fps(summary.render_fps) or 'n/a'}",
        f"Peak components:      {summary.peak_components}",
        f"Final components:     {summary.final_components}",
        f"Diverged frames:      {summary.diverged_frames}",
    ]
    with open(txt_path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    logger.info("report written to %s", directory)
    return csv_path, txt_path


_UPPER_6 = [(i, j) for i in range(6) for j in range(i, 6)]


def write_covariance_sidecar(path: str, timestamps: Sequence[float], covariances: Sequence[np.ndarray]) -> None:
    """One row per pose: timestamp followed by the 21 upper-triangular covariance entries."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["timestamp"] + [f"c{i}{j}" for i, j in _UPPER_6])
        for timestamp, sigma in zip(timestamps, covariances):
            writer.writerow([format(float(timestamp), ".17g")] + [format(float(sigma[i, j]), ".17g") for i, j in _UPPER_6])


def read_covariance_sidecar(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of write_covariance_sidecar: timestamps (N,) and covariances (N, 6, 6)."""
    with open(path, "r", newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))[1:]
    timestamps = np.array([float(r[0]) for r in rows])
    covariances = np.zeros((len(rows), 6, 6))
    for n, row in enumerate(rows):
        for value, (i, j) in zip(row[1:], _UPPER_6):
            covariances[n, i, j] = covariances[n, j, i] = float(value)
    return timestamps, covariances
