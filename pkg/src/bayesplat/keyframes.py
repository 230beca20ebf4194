"""
Keyframe selection, the sliding-window buffer and adaptive map management.

A frame becomes a keyframe when it sees too many components the last keyframe
did not (co-visibility) or when too many frames have passed. Keyframes in the
window keep their points and their contribution to the map statistics, so the
window can be refined jointly: the map posterior is always the buffer's anchor
(every observation outside the window) updated with the window statistics.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import Diverged
from .frontend import CameraIntrinsics, FrameObservation, PointBatch
from .infer import InferenceSettings, batch_stats, compute_responsibilities, elbo
from .lie import RigidTransform, act
from .splatmap import MixtureParams, MixtureStats, SplatMap, component_params
from .track import PosePosterior, TrackingDefaults, iterate_pose

logger = logging.getLogger(__name__)


class KeyframeDefaults:
    """Selection thresholds and window sizes."""

    COVIS_THRESHOLD = 0.80
    MAX_INTERVAL = 30  # frames
    WINDOW = 8
    STALE_WINDOW = 5  # keyframes
    COVERAGE_THRESHOLD = 3.0  # summed per-axis sigmas
    SWEEPS = 2

    # New components per keyframe
    MAX_INSERT = 4000

    DEPTH_RANGE = (0.1, 8.0)  # m

    # Points scored per chunk in the coverage search
    COVERAGE_CHUNK = 256


# =============================================================================
# SELECTION
# =============================================================================


def keyframe_trigger(frame_covis: float, frames_since_last: int, covis_threshold: float = KeyframeDefaults.COVIS_THRESHOLD, max_interval: int = KeyframeDefaults.MAX_INTERVAL) -> Optional[str]:
    """'covis', 'temporal' or None. Co-visibility takes precedence when both hold."""
    if frame_covis < covis_threshold:
        return "covis"
    if frames_since_last >= max_interval:
        return "temporal"
    return None


def should_insert_keyframe(frame_covis: float, frames_since_last: int, covis_threshold: float = KeyframeDefaults.COVIS_THRESHOLD, max_interval: int = KeyframeDefaults.MAX_INTERVAL) -> bool:
    return keyframe_trigger(frame_covis, frames_since_last, covis_threshold, max_interval) is not None


def visible_components(splat_map: SplatMap, pose: RigidTransform, intr: CameraIntrinsics, depth_range: Tuple[float, float] = KeyframeDefaults.DEPTH_RANGE) -> np.ndarray:
    """Ids of components whose mean projects inside the image at a depth within ``depth_range``."""
    if splat_map.size == 0:
        return np.zeros(0, dtype=np.int64)
    cam = act(pose, splat_map.means)
    z = cam[:, 2]
    in_depth = (z > 0) & (z >= depth_range[0]) & (z <= depth_range[1])
    uv = np.full((cam.shape[0], 2), -1.0)
    uv[in_depth] = intr.project(cam[in_depth])
    inside = in_depth & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
    return np.flatnonzero(inside)


def covisibility(
    splat_map: SplatMap,
    pose: RigidTransform,
    intr: CameraIntrinsics,
    reference_visible: Sequence[int],
    depth_range: Tuple[float, float] = KeyframeDefaults.DEPTH_RANGE,
) -> float:
    """Fraction of the currently visible components that the reference view also saw; 1.0 if none are visible."""
    visible = visible_components(splat_map, pose, intr, depth_range)
    if visible.size == 0:
        return 1.0
    reference = np.asarray(sorted(reference_visible), dtype=np.int64)
    return float(np.isin(visible, reference).sum()) / visible.size


# =============================================================================
# THE BUFFER
# =============================================================================


@dataclass
class Keyframe:
    id: int
    frame_index: int
    batch: PointBatch  # camera frame
    prediction: PosePosterior
    pose: PosePosterior
    stats: MixtureStats
    visible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frame: Optional[FrameObservation] = None
    inserted: int = 0
    respawned: int = 0


@dataclass
class KeyframeBuffer:
    """At most ``capacity`` keyframes, oldest evicted first.

    ``anchor`` is the conjugate posterior given every observation outside the
    window; eviction moves a keyframe's statistics into it.
    """

    capacity: int = KeyframeDefaults.WINDOW
    window: List[Keyframe] = field(default_factory=list)
    anchor: Optional[MixtureParams] = None
    marginalized_count: int = 0
    frozen_poses: List[Tuple[int, RigidTransform]] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"window capacity must be at least 1, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.window)

    @property
    def next_id(self) -> int:
        return self.window[-1].id + 1 if self.window else self.marginalized_count

    @property
    def latest(self) -> Optional[Keyframe]:
        return self.window[-1] if self.window else None

    def push(self, keyframe: Keyframe) -> List[Keyframe]:
        """Append ``keyframe`` and return the keyframes evicted to respect the capacity."""
        if self.window and keyframe.id <= self.window[-1].id:
            raise ValueError(f"keyframe id {keyframe.id} does not follow {self.window[-1].id}")
        self.window.append(keyframe)
        evicted = []
        while len(self.window) > self.capacity:
            evicted.append(self.evict())
        return evicted

    def evict(self) -> Keyframe:
        """Marginalize the oldest keyframe: freeze its pose and fold its statistics into the anchor."""
        oldest = self.window.pop(0)
        if self.anchor is not None:
            self.anchor = self.anchor.update(oldest.stats)
        self.frozen_poses.append((oldest.id, oldest.pose.fold()))
        self.marginalized_count += 1
        logger.debug("keyframe %d marginalized", oldest.id)
        return oldest

    def absorb(self, stats: MixtureStats) -> None:
        """Fold statistics of a frame outside the window into the anchor."""
        if self.anchor is not None:
            self.anchor = self.anchor.update(stats)

    def window_stats(self, size: int) -> MixtureStats:
        total = MixtureStats.zeros(size)
        for keyframe in self.window:
            total = total + keyframe.stats
        return total

    def follow(self, kept: np.ndarray, splat_map: SplatMap) -> None:
        """Re-index after the map kept ``kept`` (in order) and appended components at the end."""
        kept = np.asarray(kept, dtype=np.int64)
        appended = splat_map.size - kept.shape[0]
        if self.anchor is None:
            self.anchor = splat_map.prior
        else:
            fresh = splat_map.prior.take(np.arange(kept.shape[0], splat_map.size))
            self.anchor = self.anchor.take(kept).concat(fresh)
        remap = np.full(max(int(kept.max(initial=-1)) + 1, 1), -1, dtype=np.int64)
        remap[kept] = np.arange(kept.shape[0])
        for keyframe in self.window:
            keyframe.stats = keyframe.stats.take(kept).pad(appended)
            seen = keyframe.visible[keyframe.visible < remap.shape[0]]
            keyframe.visible = remap[seen][remap[seen] >= 0]


# =============================================================================
# INSERTION AND RE-SPAWNING
# =============================================================================


def coverage_scores(world: np.ndarray, splat_map: SplatMap, chunk: int = KeyframeDefaults.COVERAGE_CHUNK) -> np.ndarray:
    """min_k sum_axis |w - m_k| / sigma_k,axis, with sigma from the diagonal of E[Sigma_k]; inf for an empty map."""
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    if splat_map.size == 0:
        return np.full(world.shape[0], np.inf)
    means = splat_map.means
    inv_sigma = 1.0 / np.sqrt(np.diagonal(splat_map.posterior.spatial.expected_covariance(), axis1=1, axis2=2))
    scores = np.empty(world.shape[0])
    for start in range(0, world.shape[0], chunk):
        block = world[start : start + chunk]
        distance = np.abs(block[:, None, :] - means[None, :, :]) * inv_sigma[None]
        scores[start : start + chunk] = distance.sum(axis=2).min(axis=1)
    return scores


def insert_from_keyframe(
    splat_map: SplatMap,
    batch: PointBatch,
    pose: RigidTransform,
    coverage_threshold: float = KeyframeDefaults.COVERAGE_THRESHOLD,
    keyframe: int = 0,
    max_insert: int = KeyframeDefaults.MAX_INSERT,
    buffer: Optional[KeyframeBuffer] = None,
) -> Tuple[SplatMap, int]:
    """Seed components at batch points the map does not yet cover.

    ``batch`` holds camera-frame points, already voxel filtered; ``pose`` maps
    world to camera. When more than ``max_insert`` points qualify, the least
    covered ones win.
    """
    if len(batch) == 0:
        return splat_map, 0
    world = act(pose.inverse(), batch.positions)
    scores = coverage_scores(world, splat_map)
    selected = np.flatnonzero(scores > coverage_threshold)
    if selected.size == 0:
        return splat_map, 0
    if selected.size > max_insert:
        ranked = selected[np.argsort(-scores[selected], kind="stable")]
        selected = np.sort(ranked[:max_insert])

    params = component_params(world[selected], batch.colors[selected], alpha_prior=splat_map.alpha_prior)
    kept = np.arange(splat_map.size)
    updated = splat_map.append(params, keyframe)
    if buffer is not None:
        buffer.follow(kept, updated)
    logger.debug("keyframe %d: inserted %d components", keyframe, selected.size)
    return updated, int(selected.size)


def stale_components(splat_map: SplatMap, current_kf: int, stale_window: int) -> np.ndarray:
    """Components that never gained evidence (alpha at its prior) and were not updated for ``stale_window`` keyframes."""
    if stale_window < 1:
        raise ValueError(f"stale_window must be at least 1, got {stale_window}")
    untouched = splat_map.posterior.alpha <= splat_map.alpha_prior
    old = (current_kf - splat_map.last_update_keyframe) >= stale_window
    return np.flatnonzero(untouched & old)


def respawn_stale(
    splat_map: SplatMap,
    current_kf: int,
    stale_window: int = KeyframeDefaults.STALE_WINDOW,
    insertion_queue: Optional[PointBatch] = None,
    buffer: Optional[KeyframeBuffer] = None,
) -> Tuple[SplatMap, int]:
    """Move stale components to queued world-frame points; without queued points they are removed.

    Returns the map and the number of relocated components.
    """
    stale = stale_components(splat_map, current_kf, stale_window)
    if stale.size == 0:
        return splat_map, 0

    queue = insertion_queue if insertion_queue is not None else PointBatch.empty()
    count = min(stale.size, len(queue))
    kept = np.setdiff1d(np.arange(splat_map.size), stale)
    updated = splat_map.keep(kept)
    if count:
        params = component_params(queue.positions[:count], queue.colors[:count], alpha_prior=splat_map.alpha_prior)
        updated = updated.append(params, current_kf)
        updated = _count_respawn(updated, count)
    if buffer is not None:
        buffer.follow(kept, updated)
    logger.debug("keyframe %d: %d stale components, %d relocated", current_kf, stale.size, count)
    return updated, count


def _count_respawn(splat_map: SplatMap, count: int) -> SplatMap:
    # Relocation is a removal plus an insertion; book it as a respawn instead
    return replace(
        splat_map,
        inserted_total=splat_map.inserted_total - count,
        removed_total=splat_map.removed_total - count,
        respawned_total=splat_map.respawned_total + count,
    )


# =============================================================================
# WINDOW REFINEMENT
# =============================================================================


def refine_window(
    buffer: KeyframeBuffer,
    splat_map: SplatMap,
    sweeps: int = KeyframeDefaults.SWEEPS,
    settings: InferenceSettings = InferenceSettings(),
    max_iters: int = TrackingDefaults.MAX_ITERS,
    tol: float = TrackingDefaults.TOL,
    refine_poses: bool = True,
) -> Tuple[KeyframeBuffer, SplatMap]:
    """Jointly refine the window poses and the map.

    Each sweep re-tracks every keyframe against the current map (from its own
    motion prediction), recomputes its responsibilities and statistics, and
    sets the map posterior to anchor + window statistics.
    """
    if sweeps < 1:
        raise ValueError(f"sweeps must be at least 1, got {sweeps}")
    if not buffer.window:
        return buffer, splat_map
    if buffer.anchor is None:
        buffer.anchor = splat_map.prior

    splat_map = splat_map.with_prior(buffer.anchor)
    for sweep in range(sweeps):
        if refine_poses:
            for keyframe in buffer.window:
                try:
                    keyframe.pose = iterate_pose(keyframe.batch, splat_map, keyframe.prediction, max_iters, tol, settings)
                except Diverged as exc:
                    logger.warning("keyframe %d: refinement diverged, pose kept (%s)", keyframe.id, exc)
        for keyframe in buffer.window:
            gamma = compute_responsibilities(keyframe.batch, splat_map, keyframe.pose, settings.gate_radius, settings.top_m, settings.propagate_pose_uncertainty)
            keyframe.stats = batch_stats(keyframe.batch, gamma, keyframe.pose, splat_map.size, settings.propagate_pose_uncertainty)
        splat_map = splat_map.with_stats(buffer.window_stats(splat_map.size), settings.eigen_floor)
        logger.debug("window sweep %d over %d keyframes", sweep, len(buffer.window))
    return buffer, splat_map


def window_elbo(buffer: KeyframeBuffer, splat_map: SplatMap, settings: InferenceSettings = InferenceSettings()) -> float:
    """ELBO of all window keyframes against the map, with the KL to the map prior counted once."""
    kl = splat_map.posterior.kl_divergence(splat_map.prior)
    total = -kl
    for keyframe in buffer.window:
        gamma = compute_responsibilities(keyframe.batch, splat_map, keyframe.pose, settings.gate_radius, settings.top_m, settings.propagate_pose_uncertainty)
        report = elbo(keyframe.batch, splat_map, gamma, keyframe.pose, settings.propagate_pose_uncertainty)
        total += report.total + report.kl_terms
    return total


# =============================================================================
# EVENT LOG
# =============================================================================


@dataclass
class KeyframeEvent:
    frame: int
    keyframe: int
    trigger: str
    covis: float
    inserted: int
    respawned: int


def write_events_csv(path: str, events: Sequence[KeyframeEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "keyframe", "trigger", "covis", "inserted", "respawned"])
        for event in events:
            writer.writerow([event.frame, event.keyframe, event.trigger, f"{event.covis:.6f}", event.inserted, event.respawned])


def occupied_voxels(points: np.ndarray, voxel: float) -> int:
    """Number of distinct voxels of edge ``voxel`` containing at least one point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return 0
    return int(np.unique(np.floor(points / voxel).astype(np.int64), axis=0).shape[0])

