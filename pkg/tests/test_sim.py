"""
Tests for bayesplat.sim: scenes, analytic trajectories and the on-disk dataset.
"""

import sys

import numpy as np
import pytest

sys.path.append("src")

from bayesplat.frontend import index_tum_sequence
from bayesplat.sim import (
    SensorNoise,
    SimDefaults,
    TrajectorySpec,
    default_trajectory,
    look_at,
    make_scene,
    noisy_odometry,
    sim_intrinsics,
    synthesize_frames,
    trajectory_poses,
    write_dataset,
)


class TestScenes:
    @pytest.mark.parametrize("preset", ["textured_plane", "box_room", "cluttered_table"])
    def test_presets_are_deterministic(self, preset):
        first = make_scene(preset, seed=3, density=25.0)
        second = make_scene(preset, seed=3, density=25.0)
        assert first.size > 0
        assert np.array_equal(first.gt_map.means, second.gt_map.means)
        assert np.array_equal(first.gt_map.posterior.color.m, second.gt_map.posterior.color.m)
        lower, upper = first.bounds
        assert np.all(first.gt_map.means >= lower - 1e-9)
        assert np.all(first.gt_map.means <= upper + 1e-9)

    def test_seed_moves_the_clutter(self):
        assert not np.array_equal(make_scene("cluttered_table", seed=1).gt_map.means, make_scene("cluttered_table", seed=2).gt_map.means)

    def test_density_sets_the_grid(self):
        scene = make_scene("textured_plane", density=100.0)
        assert scene.size == 400
        covariance = scene.gt_map.posterior.spatial.expected_covariance()[0]
        assert covariance[2, 2] == pytest.approx(SimDefaults.NORMAL_SIGMA**2, rel=1e-5)
        assert covariance[0, 0] == pytest.approx((SimDefaults.TANGENT_FACTOR * 0.1) ** 2, rel=1e-5)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            make_scene("warehouse")
        with pytest.raises(ValueError):
            make_scene("box_room", density=0.0)


class TestTrajectories:
    def test_look_at(self):
        pose = look_at(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 0.0]))
        assert pose.is_valid()
        forward = pose.R[:, 2]
        assert np.allclose(forward, -np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0))
        assert pose.R[:, 1] @ np.array([0.0, 0.0, 1.0]) < 0
        assert np.allclose(pose.t, [1.0, 2.0, 3.0])

    def test_look_at_along_up(self):
        pose = look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
        assert pose.is_valid()
        assert np.allclose(pose.R[:, 2], [0.0, 0.0, -1.0])
        with pytest.raises(ValueError):
            look_at(np.zeros(3), np.zeros(3))

    @pytest.mark.parametrize("kind", ["orbit", "lissajous", "line"])
    def test_frame_count_and_timing(self, kind):
        spec = TrajectorySpec(kind, duration=2.0, frame_rate=30.0)
        truth = trajectory_poses(spec)
        assert spec.frame_count == len(truth) == 60
        assert np.allclose(np.diff(truth.timestamps), 1.0 / 30.0)
        target = np.asarray(spec.look_at)
        for pose in truth.poses[::10]:
            direction = target - pose.t
            assert np.allclose(pose.R[:, 2], direction / np.linalg.norm(direction))

    @pytest.mark.parametrize("preset", ["textured_plane", "box_room", "cluttered_table"])
    def test_default_trajectories(self, preset):
        assert default_trajectory(preset, frames=10).frame_count == 10
        assert default_trajectory(preset).frame_count == SimDefaults.FRAMES

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            TrajectorySpec("spiral")
        with pytest.raises(ValueError):
            TrajectorySpec(frame_rate=0.0)

    def test_noiseless_odometry_chains_to_the_truth(self):
        truth = trajectory_poses(default_trajectory("box_room", frames=12))
        motions = noisy_odometry(truth.poses, 0.0, 0.0)
        T_cw = truth.poses[0].inverse()
        for motion, expected in zip(motions[1:], truth.poses[1:]):
            T_cw = motion @ T_cw
            assert np.allclose(T_cw.inverse().as_matrix(), expected.as_matrix(), atol=1e-12)

    def test_odometry_noise_is_seeded(self):
        truth = trajectory_poses(default_trajectory("box_room", frames=5))
        first = noisy_odometry(truth.poses, 0.01, 0.01, seed=4)
        second = noisy_odometry(truth.poses, 0.01, 0.01, seed=4)
        assert all(np.array_equal(a.as_matrix(), b.as_matrix()) for a, b in zip(first, second))


class TestFrames:
    def test_rendered_frames_see_the_plane(self):
        scene = make_scene("textured_plane", density=100.0)
        frame, pose = next(synthesize_frames(scene, default_trajectory("textured_plane", frames=3)))
        intr = sim_intrinsics()
        frame.check_dimensions(intr)
        assert frame.color.dtype == np.uint8
        assert frame.valid_mask.mean() > 0.5
        depth = frame.depth[frame.valid_mask] / intr.depth_scale
        # The plane sits at z = 0 with the camera about 1.2 m above it
        assert 0.9 < np.median(depth) < 1.6

    def test_dataset_roundtrip(self, tmp_path):
        scene = make_scene("textured_plane", density=100.0)
        spec = default_trajectory("textured_plane", frames=3)
        noise = SensorNoise(depth_sigma=0.005, color_sigma=0.01)
        frames = list(synthesize_frames(scene, spec, noise=noise, seed=7))
        assert write_dataset(str(tmp_path), iter(frames), sim_intrinsics()) == 3

        index = index_tum_sequence(str(tmp_path))
        assert index.intrinsics.to_dict() == sim_intrinsics().to_dict()
        loaded = list(index.frames())
        assert len(loaded) == 3
        for (original, truth), (parsed, parsed_truth) in zip(frames, loaded):
            assert parsed.timestamp == original.timestamp
            assert np.array_equal(parsed.color, original.color)
            assert np.array_equal(parsed.depth, original.depth)
            assert np.allclose(parsed_truth.as_matrix(), truth.as_matrix(), atol=1e-12)

    def test_synthesis_is_deterministic(self):
        scene = make_scene("textured_plane", density=100.0)
        spec = default_trajectory("textured_plane", frames=2)
        noise = SensorNoise(depth_sigma=0.005)
        first = [f.depth for f, _ in synthesize_frames(scene, spec, noise=noise, seed=2)]
        second = [f.depth for f, _ in synthesize_frames(scene, spec, noise=noise, seed=2)]
        assert all(np.array_equal(a, b) for a, b in zip(first, second))
