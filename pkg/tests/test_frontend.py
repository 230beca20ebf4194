"""
Tests for bayesplat.frontend: back-projection, voxel downsampling and the
TUM-layout dataset reader.
"""

import sys

import cv2
import numpy as np
import pytest

sys.path.append("src")

from bayesplat.errors import DatasetError, DimensionMismatch, MissingIndexFile, NoAssociation
from bayesplat.evaluation import Trajectory, write_tum_trajectory
from bayesplat.frontend import (
    CameraIntrinsics,
    FrameObservation,
    PointBatch,
    backproject,
    index_tum_sequence,
    load_tum_sequence,
    nearest_timestamp,
    read_index_file,
    read_intrinsics_file,
    voxel_downsample,
    write_intrinsics_file,
)
from bayesplat.lie import RigidTransform, exp_se3


def flat_frame(intr: CameraIntrinsics, depth_m: float = 2.0, timestamp: float = 0.0) -> FrameObservation:
    depth = np.full((intr.height, intr.width), depth_m * intr.depth_scale, dtype=np.uint16)
    color = np.zeros((intr.height, intr.width, 3), dtype=np.uint8)
    color[..., 0] = 255
    return FrameObservation.create(timestamp, color, depth)


class TestIntrinsics:
    def test_projection_inverts_backprojection(self, small_intrinsics):
        frame = flat_frame(small_intrinsics)
        batch = backproject(frame, small_intrinsics)
        pixels = small_intrinsics.project(batch.positions)
        assert np.allclose(pixels, batch.pixel_indices)

    def test_invalid_intrinsics(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=10.0, cy=1.0, width=4, height=4)

    def test_file_roundtrip(self, tmp_path, small_intrinsics):
        path = tmp_path / "intrinsics.txt"
        write_intrinsics_file(str(path), small_intrinsics)
        assert read_intrinsics_file(str(path)) == small_intrinsics

    def test_file_with_missing_keys(self, tmp_path):
        path = tmp_path / "intrinsics.txt"
        path.write_text("fx=100\nfy=100\n")
        with pytest.raises(DatasetError, match="missing intrinsics"):
            read_intrinsics_file(str(path))


class TestBackprojection:
    def test_flat_wall(self, small_intrinsics):
        batch = backproject(flat_frame(small_intrinsics, 2.0), small_intrinsics)
        assert len(batch) == small_intrinsics.width * small_intrinsics.height
        assert np.allclose(batch.positions[:, 2], 2.0)
        assert np.allclose(batch.colors, [1.0, 0.0, 0.0])
        # Pixel (cx, cy) would sit on the optical axis; its neighbors straddle it
        center = np.flatnonzero((batch.pixel_indices[:, 0] == 20) & (batch.pixel_indices[:, 1] == 15))[0]
        assert np.allclose(batch.positions[center], [2.0 * 0.5 / 40.0, 2.0 * 0.5 / 40.0, 2.0])

    def test_stride_and_invalid_depth(self, small_intrinsics):
        frame = flat_frame(small_intrinsics)
        frame.depth[:, :10] = 0
        frame.valid_mask[:, :10] = False
        batch = backproject(frame, small_intrinsics, stride=2)
        assert len(batch) == 15 * 15
        assert batch.pixel_indices[:, 0].min() == 10

    def test_depth_range(self, small_intrinsics):
        batch = backproject(flat_frame(small_intrinsics, 9.0), small_intrinsics, depth_range=(0.1, 8.0))
        assert len(batch) == 0

    def test_dimension_mismatch(self, small_intrinsics):
        frame = FrameObservation.create(0.0, np.zeros((10, 10, 3), np.uint8), np.zeros((10, 10), np.uint16))
        with pytest.raises(DimensionMismatch):
            backproject(frame, small_intrinsics)

    def test_bad_stride(self, small_intrinsics):
        with pytest.raises(ValueError):
            backproject(flat_frame(small_intrinsics), small_intrinsics, stride=0)


class TestVoxelDownsample:
    def test_one_centroid_per_voxel(self):
        positions = np.array([[0.01, 0.01, 0.01], [0.03, 0.03, 0.03], [0.15, 0.0, 0.0], [0.16, 0.0, 0.0]])
        colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.2, 0.2, 0.2], [0.4, 0.4, 0.4]])
        out = voxel_downsample(PointBatch.from_arrays(positions, colors), 0.1)
        assert len(out) == 2
        assert np.allclose(out.positions[0], [0.02, 0.02, 0.02])
        assert np.allclose(out.colors[1], [0.3, 0.3, 0.3])

    def test_idempotent_count(self, rng):
        batch = PointBatch.from_arrays(rng.uniform(0, 1, size=(500, 3)), rng.uniform(size=(500, 3)))
        once = voxel_downsample(batch, 0.1)
        assert len(once) <= 1000
        # Centroids stay inside their voxel, so a second pass keeps every one
        assert len(voxel_downsample(once, 0.1)) == len(once)

    def test_empty_and_invalid(self):
        assert len(voxel_downsample(PointBatch.empty(), 0.1)) == 0
        with pytest.raises(ValueError):
            voxel_downsample(PointBatch.empty(), 0.0)

    def test_batch_helpers(self):
        batch = PointBatch.from_arrays(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]))
        moved = batch.transformed(RigidTransform.from_translation([0.0, 0.0, 1.0]))
        assert np.allclose(moved.positions[:, 2], 2.0)
        assert len(batch.concat(moved)) == 4
        assert len(batch.subset(np.array([False, True]))) == 1
        with pytest.raises(DimensionMismatch):
            PointBatch(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 2)))


def write_sequence(root, intr: CameraIntrinsics, stamps, depth_offset: float = 0.001, truth: bool = True):
    (root / "rgb").mkdir()
    (root / "depth").mkdir()
    rgb_lines, depth_lines = ["# color"], ["# depth"]
    for i, t in enumerate(stamps):
        frame = flat_frame(intr, 1.0 + 0.1 * i)
        cv2.imwrite(str(root / "rgb" / f"{i}.png"), cv2.cvtColor(frame.color, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / "depth" / f"{i}.png"), frame.depth)
        rgb_lines.append(f"{t:.6f} rgb/{i}.png")
        depth_lines.append(f"{t + depth_offset:.6f} depth/{i}.png")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_intrinsics_file(str(root / "intrinsics.txt"), intr)
    if truth:
        poses = [exp_se3([0.1 * i, 0, 0, 0, 0, 0]) for i in range(len(stamps))]
        write_tum_trajectory(str(root / "groundtruth.txt"), Trajectory(np.array(stamps), poses))


class TestDataset:
    def test_index_and_frames(self, tmp_path, small_intrinsics):
        write_sequence(tmp_path, small_intrinsics, [1.0, 1.1, 1.2])
        index = index_tum_sequence(str(tmp_path))
        assert len(index) == 3
        assert index.intrinsics == small_intrinsics
        frames = list(index.frames())
        frame, truth = frames[2]
        assert frame.timestamp == pytest.approx(1.2)
        assert frame.color[0, 0].tolist() == [255, 0, 0]
        assert np.allclose(backproject(frame, small_intrinsics).positions[:, 2], 1.2)
        assert np.allclose(truth.t, [0.2, 0.0, 0.0])
        assert len(list(index.frames(limit=2))) == 2

    def test_unmatched_depth_is_skipped(self, tmp_path, small_intrinsics):
        write_sequence(tmp_path, small_intrinsics, [1.0, 1.1], truth=False)
        lines = (tmp_path / "depth.txt").read_text().splitlines()
        lines[-1] = "9.000000 depth/1.png"
        (tmp_path / "depth.txt").write_text("\n".join(lines) + "\n")
        index = index_tum_sequence(str(tmp_path))
        assert len(index) == 1
        assert index.dropped == 1
        assert index.entries[0][3] is None

    def test_no_association_at_all(self, tmp_path, small_intrinsics):
        write_sequence(tmp_path, small_intrinsics, [1.0, 1.1], depth_offset=0.5, truth=False)
        with pytest.raises(NoAssociation):
            index_tum_sequence(str(tmp_path))

    def test_missing_index_file(self, tmp_path):
        (tmp_path / "rgb.txt").write_text("")
        with pytest.raises(MissingIndexFile, match="depth.txt"):
            index_tum_sequence(str(tmp_path))

    def test_load_streams_frames_with_truth(self, tmp_path, small_intrinsics):
        write_sequence(tmp_path, small_intrinsics, [1.0, 1.1, 1.2])
        pairs = list(load_tum_sequence(str(tmp_path), intrinsics=small_intrinsics))
        assert len(pairs) == 3
        assert all(isinstance(frame, FrameObservation) for frame, _ in pairs)
        assert all(truth is not None for _, truth in pairs)

    def test_load_checks_index_files_before_streaming(self, tmp_path):
        with pytest.raises(MissingIndexFile):
            load_tum_sequence(str(tmp_path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            index_tum_sequence(str(tmp_path / "nope"))

    def test_index_file_parsing(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("# comment\n\n2.0 b.png\n1.0 a.png\n")
        assert read_index_file(str(path)) == [(1.0, "a.png"), (2.0, "b.png")]
        path.write_text("abc a.png\n")
        with pytest.raises(DatasetError):
            read_index_file(str(path))

    def test_nearest_timestamp(self):
        times = np.array([0.0, 0.1, 0.2])
        assert nearest_timestamp(times, 0.11, 0.02) == 1
        assert nearest_timestamp(times, 0.15, 0.02) is None
        assert nearest_timestamp(np.zeros(0), 0.0, 1.0) is None
