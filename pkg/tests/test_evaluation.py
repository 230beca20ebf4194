"""
Tests for bayesplat.evaluation: TUM trajectories, association, alignment,
ATE and the run report.
"""

import csv
import sys

import numpy as np
import pytest

sys.path.append("src")

from conftest import random_transform

from bayesplat.errors import TooFewPairs, TrajectoryFormatError
from bayesplat.evaluation import (
    RunSummary,
    Trajectory,
    alignment_residuals,
    associate,
    ate_rmse,
    kabsch,
    read_covariance_sidecar,
    read_tum_trajectory,
    umeyama_align,
    write_covariance_sidecar,
    write_report,
    write_tum_trajectory,
)
from bayesplat.lie import RigidTransform


def zig_zag(samples: int = 40, offset: float = 0.01):
    """Truth on a planar arc, each position held for two stamps; the estimate alternates +-offset off the plane."""
    timestamps = 0.1 * np.arange(samples)
    angles = 0.3 * (np.arange(samples) // 2)
    positions = np.column_stack([np.cos(angles), np.zeros(samples), np.sin(angles)])
    signs = np.where(np.arange(samples) % 2 == 0, 1.0, -1.0)
    truth = Trajectory(timestamps, [RigidTransform.from_translation(p) for p in positions])
    estimate = Trajectory(timestamps, [RigidTransform.from_translation(p + [0.0, s * offset, 0.0]) for p, s in zip(positions, signs)])
    return estimate, truth


class TestTumFiles:
    def test_write_read_identity(self, tmp_path, rng):
        poses = [random_transform(rng, translation=3.0, angle=3.0) for _ in range(25)]
        trajectory = Trajectory(1305031102.175304 + 0.033 * np.arange(25), poses)
        path = tmp_path / "trajectory.txt"
        write_tum_trajectory(str(path), trajectory)
        loaded = read_tum_trajectory(str(path))
        assert np.array_equal(loaded.timestamps, trajectory.timestamps)
        for original, parsed in zip(poses, loaded.poses):
            assert np.allclose(original.R, parsed.R, atol=1e-12)
            assert np.array_equal(original.t, parsed.t)

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("# header\n\n1.0 0 0 0 0 0 0 1\n2.0, 1, 2, 3, 0, 0, 0, 2\n")
        loaded = read_tum_trajectory(str(path))
        assert len(loaded) == 2
        assert np.allclose(loaded.poses[1].R, np.eye(3))
        assert np.allclose(loaded.positions[1], [1.0, 2.0, 3.0])

    @pytest.mark.parametrize(
        "text, line",
        [
            ("1.0 0 0 0 0 0 0 1\n2.0 0 0 0 0 0 1\n", 2),
            ("# c\n1.0 0 0 x 0 0 0 1\n", 2),
            ("1.0 0 0 0 0 0 0 0\n", 1),
            ("1.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n", 2),
            ("1.0 0 0 nan 0 0 0 1\n", 1),
        ],
    )
    def test_bad_lines(self, tmp_path, text, line):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(TrajectoryFormatError) as info:
            read_tum_trajectory(str(path))
        assert info.value.line == line
        assert str(path) in str(info.value)

    def test_timestamps_must_increase(self):
        with pytest.raises(ValueError):
            Trajectory([1.0, 1.0], [RigidTransform.identity()] * 2)


class TestAssociation:
    def test_pairs_within_tolerance(self):
        assert associate([0.0, 0.1, 0.2], [0.005, 0.095, 0.5], 0.02) == [(0, 0), (1, 1)]

    def test_closest_pair_wins(self):
        assert associate([0.0, 0.01], [0.009], 0.02) == [(1, 0)]

    def test_empty(self):
        assert associate([], [1.0]) == []


class TestAlignment:
    def test_kabsch_recovers_rigid_transforms(self, rng):
        for _ in range(100):
            T = random_transform(rng, translation=5.0, angle=3.0)
            source = rng.normal(size=(12, 3))
            recovered = kabsch(source, source @ T.R.T + T.t)
            assert np.allclose(recovered.R, T.R, atol=1e-9)
            assert np.allclose(recovered.t, T.t, atol=1e-9)

    def test_estimate_equal_to_truth(self):
        estimate, truth = zig_zag(offset=0.0)
        T = umeyama_align(estimate, truth)
        assert np.allclose(T.R, np.eye(3), atol=1e-12)
        assert np.allclose(T.t, 0.0, atol=1e-12)
        assert ate_rmse(estimate, truth) == pytest.approx(0.0, abs=1e-9)

    def test_zig_zag_is_one_centimeter(self):
        estimate, truth = zig_zag()
        assert ate_rmse(estimate, truth) == pytest.approx(1.0, rel=1e-9)
        assert np.allclose(alignment_residuals(estimate, truth), 0.01)

    def test_ate_ignores_a_rigid_world_change(self, rng):
        estimate, truth = zig_zag()
        moved = estimate.transformed(random_transform(rng, translation=2.0, angle=2.0))
        assert ate_rmse(moved, truth) == pytest.approx(1.0, rel=1e-9)

    def test_too_few_pairs(self):
        estimate, truth = zig_zag()
        shifted = Trajectory(truth.timestamps + 10.0, truth.poses)
        with pytest.raises(TooFewPairs) as info:
            ate_rmse(estimate, shifted)
        assert info.value.count == 0


class TestReports:
    def test_report_marks_missing_metrics(self, tmp_path):
        summary = RunSummary(frames=10, keyframes=2, ate_cm=0.5, ate_pairs=10, peak_components=300, final_components=280)
        csv_path, txt_path = write_report(summary, str(tmp_path / "out"))
        with open(csv_path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][:4] == ["frames", "keyframes", "ate_cm", "ate_pairs"]
        values = dict(zip(rows[0], rows[1]))
        assert values["ate_cm"] == "0.5"
        assert values["mean_psnr"] == ""
        text = open(txt_path).read()
        assert "Mean PSNR:            n/a" in text
        assert "Final components:     280" in text

    def test_covariance_sidecar(self, tmp_path, rng):
        A = rng.normal(size=(3, 6, 6))
        covariances = A @ A.transpose(0, 2, 1)
        covariances = 0.5 * (covariances + covariances.transpose(0, 2, 1))
        path = tmp_path / "trajectory_cov.csv"
        write_covariance_sidecar(str(path), [0.5, 1.5, 2.5], covariances)
        timestamps, loaded = read_covariance_sidecar(str(path))
        assert np.array_equal(timestamps, [0.5, 1.5, 2.5])
        assert np.array_equal(loaded, covariances)
