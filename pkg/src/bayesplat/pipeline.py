"""
The SLAM frame loop and its artifacts.

For every frame: predict the pose from the motion model, track it against the
map, then either promote the frame to a keyframe (insert, re-spawn, refine the
window) or fold it into the map with a few CAVI steps. Per-frame problems are
logged and recorded on the frame; they never stop the run.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .config import RunConfig, write_config
from .errors import Diverged, EmptyBatch, TooFewPairs
from .evaluation import RunSummary, Trajectory, ate_rmse, associate, read_tum_trajectory, write_covariance_sidecar, write_report, write_tum_trajectory
from .frontend import CameraIntrinsics, FrameObservation, PointBatch, backproject, index_tum_sequence, read_intrinsics_file, voxel_downsample
from .infer import CaviTrace, InferenceSettings, batch_stats, run_cavi
from .keyframes import (
    Keyframe,
    KeyframeBuffer,
    KeyframeEvent,
    coverage_scores,
    covisibility,
    insert_from_keyframe,
    keyframe_trigger,
    refine_window,
    respawn_stale,
    visible_components,
    write_events_csv,
)
from .lie import RigidTransform
from .render import RenderMetrics, rasterize, render_metrics_pass, write_png_color, write_png_depth
from .sim import SensorNoise, default_trajectory, make_scene, noisy_odometry, sim_intrinsics, synthesize_frames, trajectory_poses, write_dataset
from .splatmap import MixtureStats, SplatMap, init_from_points, read_ply, write_ply
from .track import MotionPrior, PosePosterior, TrackingReport, constant_velocity_prior, odometry_prior, predict, process_noise, static_prior, track_frame

logger = logging.getLogger(__name__)


class PipelineDefaults:
    # Keyframe views scored by the render pass, evenly subsampled
    MAX_RENDER_VIEWS = 16


# =============================================================================
# RESULTS
# =============================================================================


@dataclass
class FrameLog:
    """What happened to one frame. ``pose`` is camera-to-world."""

    index: int
    timestamp: float
    pose: Optional[RigidTransform] = None
    sigma_xi: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    iterations: int = 0
    converged: bool = False
    residual: float = 0.0
    min_information_eigenvalue: float = 0.0
    components: int = 0
    keyframe: Optional[int] = None
    trigger: str = ""
    covis: float = 1.0
    inserted: int = 0
    respawned: int = 0
    tracking_time: float = 0.0
    issues: List[str] = field(default_factory=list)


@dataclass
class RunResults:
    config: RunConfig
    intrinsics: CameraIntrinsics
    frame_logs: List[FrameLog]
    trajectory: Trajectory
    truth: Optional[Trajectory]
    splat_map: SplatMap
    events: List[KeyframeEvent]
    summary: RunSummary
    render_metrics: RenderMetrics
    trace: Optional[CaviTrace] = None
    keyframe_views: List[Tuple[int, FrameObservation]] = field(default_factory=list)


# =============================================================================
# INPUT STREAMS
# =============================================================================


FrameStream = Iterator[Tuple[FrameObservation, Optional[RigidTransform]]]


def open_stream(config: RunConfig) -> Tuple[CameraIntrinsics, FrameStream, Optional[List[RigidTransform]]]:
    """Intrinsics, (frame, camera-to-world truth) stream and optional relative odometry."""
    if config.sim:
        intr = sim_intrinsics()
        if config.depth_scale > 0:
            intr = replace(intr, depth_scale=config.depth_scale)
        scene = make_scene(config.sim, config.seed, config.sim_density or None)
        traj = default_trajectory(config.sim, config.frames or 200, config.sim_frame_rate)
        odometry = None
        if config.motion_model == "odometry":
            odometry = noisy_odometry(trajectory_poses(traj).poses, config.odometry_translation_noise, config.odometry_rotation_noise, config.seed + 1)
        stream = synthesize_frames(scene, traj, intr, SensorNoise(config.depth_noise, config.color_noise), config.seed)
        return intr, stream, odometry

    index = index_tum_sequence(config.dataset, config.max_dt)
    if config.depth_scale > 0:
        index.intrinsics = replace(index.intrinsics, depth_scale=config.depth_scale)
    return index.intrinsics, index.frames(config.frames or None), None


# =============================================================================
# THE FRAME LOOP
# =============================================================================


class SlamSession:
    """Mutable state of a run, advanced one frame at a time."""

    def __init__(self, config: RunConfig, intr: CameraIntrinsics, odometry: Optional[List[RigidTransform]] = None):
        self.config = config
        self.intr = intr
        self.odometry = odometry
        self.settings = InferenceSettings(config.gate_radius, config.top_m, config.propagate_pose_uncertainty, config.eigen_floor or None)
        self.noise = process_noise(config.translation_noise, config.rotation_noise)
        self.depth_range = (config.depth_min, config.depth_max)

        self.splat_map: Optional[SplatMap] = None
        self.posterior: Optional[PosePosterior] = None
        self.buffer = KeyframeBuffer(config.window)
        self.history: List[RigidTransform] = []  # world to camera
        self.last_keyframe_frame = 0
        self.peak_components = 0
        self.diverged_frames = 0

        self.logs: List[FrameLog] = []
        self.events: List[KeyframeEvent] = []
        self.keyframe_views: List[Tuple[int, FrameObservation]] = []
        self.trace = CaviTrace() if config.cavi_trace else None

    # --- helpers -------------------------------------------------------------

    def _motion_prior(self, index: int) -> MotionPrior:
        previous = self.history[-1]
        if self.config.motion_model == "static":
            return static_prior(previous, self.noise)
        if self.config.motion_model == "odometry" and self.odometry is not None and index < len(self.odometry):
            return odometry_prior(previous, self.odometry[index], self.noise)
        before = self.history[-2] if len(self.history) > 1 else None
        return constant_velocity_prior(previous, before, self.noise)

    def _keyframe_batch(self, frame: FrameObservation, voxel: float) -> PointBatch:
        return voxel_downsample(backproject(frame, self.intr, self.config.keyframe_stride, self.depth_range), voxel)

    def _finish(self, log: FrameLog) -> None:
        assert self.posterior is not None
        T_cw = self.posterior.fold()
        self.history.append(T_cw)
        log.pose = T_cw.inverse()
        log.sigma_xi = self.posterior.sigma_xi.copy()
        log.components = self.splat_map.size if self.splat_map is not None else 0
        self.peak_components = max(self.peak_components, log.components)
        for issue in log.issues:
            logger.warning("frame %d: %s", log.index, issue)
        self.logs.append(log)

    # --- stages ----------------------------------------------------------------

    def initialize(self, index: int, frame: FrameObservation, truth: Optional[RigidTransform], log: FrameLog) -> bool:
        pose = truth.inverse() if (truth is not None and self.config.init_from_truth) else RigidTransform.identity()
        batch = self._keyframe_batch(frame, self.config.init_voxel)
        if len(batch) == 0:
            log.issues.append("no valid depth; map initialization deferred")
            self.logs.append(log)
            return False

        self.splat_map = init_from_points(batch, pose, alpha_prior=self.config.alpha_prior)
        self.posterior = PosePosterior.at(pose)
        self.buffer.anchor = self.splat_map.prior
        keyframe = Keyframe(self.buffer.next_id, index, batch, self.posterior, self.posterior, MixtureStats.zeros(self.splat_map.size), frame=frame)
        self.buffer.push(keyframe)
        previous_alpha = self.splat_map.posterior.alpha.copy()
        self.buffer, self.splat_map = refine_window(self.buffer, self.splat_map, self.config.window_sweeps, self.settings, refine_poses=False)
        self.splat_map = self.splat_map.touch(previous_alpha, keyframe.id)
        keyframe.visible = visible_components(self.splat_map, pose, self.intr, self.depth_range)

        log.keyframe = keyframe.id
        log.trigger = "init"
        log.inserted = self.splat_map.size
        log.converged = True
        self.last_keyframe_frame = index
        self.keyframe_views.append((index, frame))
        self.events.append(KeyframeEvent(index, keyframe.id, "init", 1.0, self.splat_map.size, 0))
        logger.info("frame %d: map initialized with %d components", index, self.splat_map.size)
        self._finish(log)
        return True

    def step(self, index: int, frame: FrameObservation, truth: Optional[RigidTransform]) -> FrameLog:
        log = FrameLog(index, frame.timestamp)
        log.issues.extend(frame.issues)
        frame.check_dimensions(self.intr)
        if self.splat_map is None:
            self.initialize(index, frame, truth, log)
            return log
        assert self.posterior is not None

        predicted = predict(self.posterior, self._motion_prior(index))
        batch = backproject(frame, self.intr, self.config.track_stride, self.depth_range)
        if len(batch) == 0:
            log.issues.append("no valid depth; pose taken from the motion model")
            self.posterior = predicted
            self._finish(log)
            return log

        start = time.perf_counter()
        report: Optional[TrackingReport] = None
        try:
            report = track_frame(batch, self.splat_map, predicted, self.config.max_iters, self.config.tol, self.settings, self.config.divergence_patience)
            self.posterior = report.posterior
            log.iterations = report.iterations
            log.converged = report.converged
            log.residual = report.residuals[-1] if report.residuals else 0.0
            log.min_information_eigenvalue = report.min_information_eigenvalue
            log.issues.extend(report.issues)
        except Diverged as exc:
            self.diverged_frames += 1
            log.issues.append(f"tracking diverged, continuing on the motion prior ({exc})")
            self.posterior = predicted
        log.tracking_time = time.perf_counter() - start

        T_cw = self.posterior.fold()
        reference = self.buffer.latest.visible if self.buffer.latest is not None else np.zeros(0, dtype=np.int64)
        log.covis = covisibility(self.splat_map, T_cw, self.intr, reference, self.depth_range)
        trigger = keyframe_trigger(log.covis, index - self.last_keyframe_frame, self.config.covis_threshold, self.config.max_interval)

        if trigger is not None:
            unassigned = batch.subset(report.gamma.unassigned) if report is not None and report.gamma is not None else PointBatch.empty()
            self._keyframe(index, frame, predicted, trigger, unassigned, log)
        else:
            self._integrate(index, batch, log)
        self._finish(log)
        return log

    def _keyframe(self, index: int, frame: FrameObservation, predicted: PosePosterior, trigger: str, unassigned: PointBatch, log: FrameLog) -> None:
        assert self.splat_map is not None and self.posterior is not None
        config = self.config
        kf_id = self.buffer.next_id
        T_cw = self.posterior.fold()
        batch = self._keyframe_batch(frame, config.insert_voxel)

        self.splat_map, inserted = insert_from_keyframe(self.splat_map, batch, T_cw, config.coverage_threshold, kf_id, config.max_insert, self.buffer)

        # Points no component explained during tracking and still uncovered
        queue = unassigned.transformed(T_cw.inverse())
        if len(queue):
            queue = queue.subset(coverage_scores(queue.positions, self.splat_map) > config.coverage_threshold)
        self.splat_map, respawned = respawn_stale(self.splat_map, kf_id, config.stale_window, queue, self.buffer)

        keyframe = Keyframe(kf_id, index, batch, predicted, self.posterior, MixtureStats.zeros(self.splat_map.size), frame=frame, inserted=inserted, respawned=respawned)
        for evicted in self.buffer.push(keyframe):
            logger.debug("keyframe %d left the window", evicted.id)

        previous_alpha = self.splat_map.posterior.alpha.copy()
        self.buffer, self.splat_map = refine_window(self.buffer, self.splat_map, config.window_sweeps, self.settings, config.max_iters, config.tol)
        self.splat_map = self.splat_map.touch(previous_alpha, kf_id)
        self.posterior = keyframe.pose
        keyframe.visible = visible_components(self.splat_map, self.posterior.fold(), self.intr, self.depth_range)

        self.last_keyframe_frame = index
        self.keyframe_views.append((index, frame))
        log.keyframe = kf_id
        log.trigger = trigger
        log.inserted = inserted
        log.respawned = respawned
        self.events.append(KeyframeEvent(index, kf_id, trigger, log.covis, inserted, respawned))
        logger.info("frame %d: keyframe %d (%s, covis %.3f), +%d components, %d respawned, %d total", index, kf_id, trigger, log.covis, inserted, respawned, self.splat_map.size)

    def _integrate(self, index: int, batch: PointBatch, log: FrameLog) -> None:
        assert self.splat_map is not None and self.posterior is not None
        self.splat_map = self.splat_map.rebase()
        previous_alpha = self.splat_map.posterior.alpha.copy()
        self.splat_map, gamma, _ = run_cavi(batch, self.splat_map, self.posterior, self.config.cavi_sweeps, self.settings, self.config.cavi_tol, self.trace, index)
        self.buffer.absorb(batch_stats(batch, gamma, self.posterior, self.splat_map.size, self.settings.propagate_pose_uncertainty))
        latest = self.buffer.latest.id if self.buffer.latest is not None else 0
        self.splat_map = self.splat_map.touch(previous_alpha, latest)


def run_slam(config: RunConfig) -> RunResults:
    """Run the full pipeline in memory; ``write_artifacts`` saves the results."""
    config.validate()
    intr, stream, odometry = open_stream(config)
    session = SlamSession(config, intr, odometry)

    truth_samples: List[Tuple[float, RigidTransform]] = []
    for index, (frame, truth) in enumerate(stream):
        session.step(index, frame, truth)
        if truth is not None:
            truth_samples.append((frame.timestamp, truth))

    if session.splat_map is None:
        raise EmptyBatch(f"none of the {len(session.logs)} frames had valid depth; nothing was mapped")

    tracked = [log for log in session.logs if log.pose is not None]
    trajectory = Trajectory(np.array([log.timestamp for log in tracked]), [log.pose for log in tracked])
    truth_traj = Trajectory.from_samples(truth_samples) if truth_samples else None

    summary = RunSummary(
        frames=len(session.logs),
        keyframes=len(session.events),
        peak_components=session.peak_components,
        final_components=session.splat_map.size,
        diverged_frames=session.diverged_frames,
    )
    if truth_traj is not None:
        try:
            summary.ate_cm = ate_rmse(trajectory, truth_traj, config.max_dt)
            summary.ate_pairs = len(associate(trajectory.timestamps, truth_traj.timestamps, config.max_dt))
        except TooFewPairs as exc:
            logger.warning("ATE not computed: %s", exc)

    metrics = RenderMetrics()
    views = _render_views(session.keyframe_views, session.logs)
    if config.render_metrics and views:
        poses = [session.logs[i].pose.inverse() for i, _ in views]
        metrics = render_metrics_pass(session.splat_map, poses, [frame for _, frame in views], intr, config.opacity_gain)
        summary.mean_psnr = metrics.mean_psnr()
        summary.mean_ssim = metrics.mean_ssim()

    if config.report_timing:
        tracking_time = sum(log.tracking_time for log in session.logs)
        tracked_frames = sum(1 for log in session.logs if log.tracking_time > 0)
        summary.tracking_fps = tracked_frames / tracking_time if tracking_time > 0 else None
        summary.render_fps = metrics.fps

    logger.info("run finished: %d frames, %d keyframes, %d components, ATE %s cm", summary.frames, summary.keyframes, summary.final_components, summary.ate_cm)
    return RunResults(config, intr, session.logs, trajectory, truth_traj, session.splat_map, session.events, summary, metrics, session.trace, views)


def _render_views(views: List[Tuple[int, FrameObservation]], logs: List[FrameLog]) -> List[Tuple[int, FrameObservation]]:
    usable = [(i, frame) for i, frame in views if logs[i].pose is not None]
    if len(usable) <= PipelineDefaults.MAX_RENDER_VIEWS:
        return usable
    picks = np.linspace(0, len(usable) - 1, PipelineDefaults.MAX_RENDER_VIEWS).round().astype(int)
    return [usable[i] for i in picks]


# =============================================================================
# ARTIFACTS
# =============================================================================


_LOG_COLUMNS = ["index", "timestamp", "iterations", "converged", "residual", "min_information_eigenvalue", "components", "keyframe", "trigger", "covis", "inserted", "respawned"]


def write_frame_log(path: str, logs: List[FrameLog], include_timing: bool) -> None:
    columns = _LOG_COLUMNS + (["tracking_time"] if include_timing else []) + ["issues"]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for log in logs:
            row = []
            for column in columns:
                value = getattr(log, column)
                if column == "issues":
                    value = "; ".join(value)
                elif isinstance(value, float):
                    value = format(value, ".10g")
                elif value is None:
                    value = ""
                row.append(value)
            writer.writerow(row)


def write_render_metrics(path: str, views: List[Tuple[int, FrameObservation]], metrics: RenderMetrics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "timestamp", "psnr_db", "ssim"])
        for (index, frame), p, s in zip(views, metrics.psnr, metrics.ssim):
            writer.writerow([index, format(frame.timestamp, ".17g"), format(p, ".6f"), format(s, ".6f")])


def write_artifacts(results: RunResults, directory: str) -> List[str]:
    """Write every run artifact into ``directory``; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    written = []

    def path(name: str) -> str:
        full = os.path.join(directory, name)
        written.append(full)
        return full

    config = results.config
    write_config(config, path("config.txt"))
    write_tum_trajectory(path("trajectory.txt"), results.trajectory, "estimated trajectory, camera to world")
    tracked = [log for log in results.frame_logs if log.pose is not None]
    write_covariance_sidecar(path("trajectory_cov.csv"), [log.timestamp for log in tracked], [log.sigma_xi for log in tracked])
    write_ply(results.splat_map, path("map.ply"))
    written.extend(write_report(results.summary, directory))
    write_events_csv(path("events.csv"), results.events)
    write_frame_log(path("frames.csv"), results.frame_logs, config.report_timing)
    if config.render_metrics:
        write_render_metrics(path("metrics.csv"), results.keyframe_views, results.render_metrics)
    if results.trace is not None:
        results.trace.write_csv(path("cavi_trace.csv"))
    if config.save_png:
        renders = os.path.join(directory, "renders")
        os.makedirs(renders, exist_ok=True)
        for index, _ in results.keyframe_views:
            rendered = rasterize(results.splat_map, results.frame_logs[index].pose.inverse(), results.intrinsics, config.opacity_gain)
            write_png_color(path(os.path.join("renders", f"color_{index:06d}.png")), rendered.color)
            write_png_depth(path(os.path.join("renders", f"depth_{index:06d}.png")), rendered.normalized_depth())
    logger.info("artifacts written to %s", directory)
    return written


# =============================================================================
# OTHER ENTRY POINTS
# =============================================================================


@dataclass
class EvalResult:
    ate_cm: float
    pairs: int
    estimate_poses: int
    truth_poses: int


def run_eval(estimate_path: str, truth_path: str, max_dt: float = 0.02) -> EvalResult:
    estimate = read_tum_trajectory(estimate_path)
    truth = read_tum_trajectory(truth_path)
    ate = ate_rmse(estimate, truth, max_dt)
    pairs = len(associate(estimate.timestamps, truth.timestamps, max_dt))
    return EvalResult(ate, pairs, len(estimate), len(truth))


def render_trajectory(map_path: str, trajectory_path: str, directory: str, intr: Optional[CameraIntrinsics] = None, opacity_gain: float = 1.0) -> int:
    """Render a saved map at every pose of a camera-to-world trajectory file; returns the view count."""
    splat_map = read_ply(map_path)
    trajectory = read_tum_trajectory(trajectory_path)
    intr = intr or sim_intrinsics()
    os.makedirs(directory, exist_ok=True)
    for i, pose in enumerate(trajectory.poses):
        rendered = rasterize(splat_map, pose.inverse(), intr, opacity_gain)
        write_png_color(os.path.join(directory, f"color_{i:06d}.png"), rendered.color)
        write_png_depth(os.path.join(directory, f"depth_{i:06d}.png"), rendered.normalized_depth())
    logger.info("rendered %d views of %s into %s", len(trajectory), map_path, directory)
    return len(trajectory)


def load_intrinsics(path: Optional[str]) -> CameraIntrinsics:
    """Intrinsics from a key=value file, a dataset folder holding intrinsics.txt, or the simulator default."""
    if not path:
        return sim_intrinsics()
    if os.path.isdir(path):
        path = os.path.join(path, "intrinsics.txt")
    return read_intrinsics_file(path)


def sim_generate(preset: str, directory: str, frames: int = 200, seed: int = 0, density: Optional[float] = None, depth_noise: float = 0.0, color_noise: float = 0.0, frame_rate: float = 30.0) -> int:
    intr = sim_intrinsics()
    scene = make_scene(preset, seed, density)
    traj = default_trajectory(preset, frames, frame_rate)
    return write_dataset(directory, synthesize_frames(scene, traj, intr, SensorNoise(depth_noise, color_noise), seed), intr)


__all__ = [
    "FrameLog",
    "RunResults",
    "SlamSession",
    "open_stream",
    "run_slam",
    "write_artifacts",
    "run_eval",
    "render_trajectory",
    "load_intrinsics",
    "sim_generate",
]
