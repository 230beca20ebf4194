"""
Tests for bayesplat.render: projection, compositing and image metrics.
"""

import math
import sys

import cv2
import numpy as np
import pytest

sys.path.append("src")

from conftest import make_map

from bayesplat.frontend import CameraIntrinsics, FrameObservation
from bayesplat.lie import RigidTransform, exp_se3
from bayesplat.render import (
    RenderDefaults,
    RenderedFrame,
    project_gaussian,
    project_splats,
    psnr,
    rasterize,
    render_metrics_pass,
    splat_opacities,
    ssim,
    write_png_color,
    write_png_depth,
)
from bayesplat.splatmap import MixtureParams, SplatMap
from bayesplat.units import unit_to_color

# Principal point on a pixel center so a splat on the optical axis hits it exactly
INTR = CameraIntrinsics(fx=50.0, fy=50.0, cx=20.0, cy=15.0, width=41, height=31, depth_scale=1000.0)
IDENTITY = RigidTransform.identity()


class TestProjection:
    def test_center_projection_and_floor(self):
        splat_map = make_map(np.array([[0.0, 0.0, 2.0]]), variance=1e-4)
        mean2d, cov2d, depth = project_gaussian(splat_map.component(0), IDENTITY, INTR)
        assert np.allclose(mean2d, [20.0, 15.0])
        assert depth == pytest.approx(2.0)
        # J Sigma J^T at the axis is (f / z)^2 * variance, plus the low-pass floor
        assert cov2d[0, 0] == pytest.approx((50.0 / 2.0) ** 2 * 1e-4 + RenderDefaults.COV2D_FLOOR)
        assert cov2d[0, 1] == pytest.approx(0.0)

    def test_behind_camera_is_not_projected(self):
        splat_map = make_map(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.01]]))
        assert project_gaussian(splat_map.component(0), IDENTITY, INTR) is None
        projected = project_splats(splat_map.means, splat_map.posterior.spatial.expected_covariance(), IDENTITY, INTR)
        assert projected.visible.tolist() == [False, False]

    def test_pose_moves_projection(self):
        splat_map = make_map(np.array([[0.5, 0.0, 2.0]]))
        T_cw = RigidTransform.from_translation([-0.5, 0.0, 0.0])
        mean2d, _, _ = project_gaussian(splat_map.component(0), T_cw, INTR)
        assert np.allclose(mean2d, [20.0, 15.0])


class TestOpacity:
    def test_uniform_weights_hit_the_cap(self):
        splat_map = make_map(np.zeros((4, 3)))
        assert np.allclose(splat_opacities(splat_map), RenderDefaults.MAX_OPACITY)

    def test_gain_and_weights(self):
        splat_map = make_map(np.zeros((2, 3)))
        splat_map = SplatMap.from_params(MixtureParams(splat_map.posterior.spatial, splat_map.posterior.color, np.array([1.0, 3.0])))
        opacity = splat_opacities(splat_map, opacity_gain=0.5)
        assert np.allclose(opacity, [0.25, 0.75])
        assert np.all(splat_opacities(splat_map, opacity_gain=0.0) == 0.0)


class TestRasterize:
    def test_single_splat(self):
        splat_map = make_map(np.array([[0.0, 0.0, 2.0]]), variance=1e-4, colors=np.array([[0.2, 0.4, 0.6]]))
        frame = rasterize(splat_map, IDENTITY, INTR)
        assert np.allclose(frame.color[15, 20], 0.99 * np.array([0.2, 0.4, 0.6]))
        assert frame.alpha[15, 20] == pytest.approx(0.99)
        assert frame.normalized_depth()[15, 20] == pytest.approx(2.0)
        # Corners are far outside three standard deviations
        assert frame.alpha[0, 0] == 0.0
        assert frame.normalized_depth()[0, 0] == 0.0

    def test_three_sigma_cutoff(self):
        splat_map = make_map(np.array([[0.0, 0.0, 2.0]]), variance=4e-4)
        frame = rasterize(splat_map, IDENTITY, INTR)
        sigma_px = math.sqrt((25.0**2) * 4e-4 + RenderDefaults.COV2D_FLOOR)
        inside = int(math.floor(2.9 * sigma_px))
        outside = int(math.ceil(3.1 * sigma_px))
        assert frame.alpha[15, 20 + inside] > 0.0
        assert frame.alpha[15, 20 + outside] == 0.0

    def test_front_splat_occludes(self):
        means = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
        colors = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        splat_map = make_map(means, variance=1e-4, colors=colors)
        frame = rasterize(splat_map, IDENTITY, INTR)
        expected = 0.99 * colors[1] + 0.01 * 0.99 * colors[0]
        assert np.allclose(frame.color[15, 20], expected)
        assert frame.alpha[15, 20] == pytest.approx(1.0 - 0.01 * 0.01)

    def test_compositing_orders_agree(self, rng):
        means = np.column_stack([rng.uniform(-0.3, 0.3, 20), rng.uniform(-0.2, 0.2, 20), rng.uniform(1.0, 3.0, 20)])
        splat_map = make_map(means, variance=2e-3, colors=rng.uniform(size=(20, 3)))
        front = rasterize(splat_map, IDENTITY, INTR, order="front_to_back")
        back = rasterize(splat_map, IDENTITY, INTR, order="back_to_front")
        assert np.allclose(front.color, back.color, atol=1e-12)
        assert np.allclose(front.depth, back.depth, atol=1e-12)
        assert np.allclose(front.alpha, back.alpha, atol=1e-12)

    def test_ray_depth_mode(self):
        splat_map = make_map(np.array([[0.0, 0.0, 2.0]]), variance=1e-2)
        center = rasterize(splat_map, IDENTITY, INTR, depth_mode="center")
        ray = rasterize(splat_map, IDENTITY, INTR, depth_mode="ray")
        assert ray.normalized_depth()[15, 20] == pytest.approx(2.0)
        # Off axis the isotropic density peaks at r.mu / r.r along the ray
        a = 5.0 / 50.0
        assert ray.normalized_depth(0.0)[15, 25] == pytest.approx(2.0 / (1.0 + a * a))
        assert center.normalized_depth(0.0)[15, 25] == pytest.approx(2.0)

    def test_empty_map_and_bad_options(self):
        splat_map = make_map(np.array([[0.0, 0.0, -2.0]]))
        frame = rasterize(splat_map, IDENTITY, INTR)
        assert not frame.alpha.any()
        assert frame.color.shape == (31, 41, 3)
        with pytest.raises(ValueError):
            rasterize(splat_map, IDENTITY, INTR, order="sideways")
        with pytest.raises(ValueError):
            rasterize(splat_map, IDENTITY, INTR, depth_mode="median")

    def test_normalized_depth_threshold(self):
        frame = RenderedFrame(np.zeros((1, 2, 3)), np.array([[1.0, 0.2]]), np.array([[0.5, 0.4]]))
        assert frame.normalized_depth(0.3).tolist() == [[2.0, 0.5]]
        assert frame.normalized_depth().tolist() == [[0.0, 0.0]]


class TestMetrics:
    def test_psnr_of_one_level_offset(self):
        image = np.full((16, 16, 3), 0.5)
        assert psnr(image + 1.0 / 255.0, image) == pytest.approx(48.13, abs=0.01)

    def test_psnr_cap_and_empty_mask(self):
        image = np.full((4, 4, 3), 0.25)
        assert psnr(image, image) == RenderDefaults.PSNR_CAP
        assert math.isnan(psnr(image, image, np.zeros((4, 4), dtype=bool)))

    def test_psnr_mask_excludes_pixels(self):
        image = np.zeros((4, 4, 3))
        reference = image.copy()
        reference[0, 0] = 1.0
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        assert psnr(image, reference, mask) == RenderDefaults.PSNR_CAP
        assert psnr(image, reference) < 20.0

    def test_ssim_identity_and_degradation(self, rng):
        image = rng.uniform(size=(32, 32, 3))
        assert ssim(image, image) == pytest.approx(1.0)
        noisy = np.clip(image + 0.4 * rng.normal(size=image.shape), 0, 1)
        assert ssim(noisy, image) < 0.9
        assert math.isnan(ssim(image, image, np.zeros((32, 32), dtype=bool)))

    def test_metrics_pass_on_own_render(self):
        splat_map = make_map(np.array([[0.0, 0.0, 2.0], [0.2, 0.1, 2.5]]), variance=5e-3, colors=np.array([[0.9, 0.1, 0.1], [0.1, 0.8, 0.2]]))
        rendered = rasterize(splat_map, IDENTITY, INTR)
        frame = FrameObservation.create(0.0, unit_to_color(rendered.color), np.ones((31, 41), dtype=np.uint16))
        metrics = render_metrics_pass(splat_map, [IDENTITY], [frame], INTR)
        assert metrics.psnr[0] > 50.0
        assert metrics.ssim[0] > 0.99
        assert metrics.fps is not None and metrics.fps > 0
        assert metrics.mean_psnr() == pytest.approx(metrics.psnr[0])

    def test_metrics_pass_length_check(self):
        with pytest.raises(ValueError):
            render_metrics_pass(make_map(np.zeros((1, 3))), [IDENTITY, IDENTITY], [], INTR)


def test_png_output(tmp_path):
    color = np.zeros((31, 41, 3))
    color[..., 0] = 1.0
    depth = np.full((31, 41), 1.5)
    write_png_color(str(tmp_path / "c.png"), color)
    write_png_depth(str(tmp_path / "d.png"), depth)
    read_color = cv2.imread(str(tmp_path / "c.png"), cv2.IMREAD_COLOR)
    read_depth = cv2.imread(str(tmp_path / "d.png"), cv2.IMREAD_UNCHANGED)
    assert read_color[0, 0].tolist() == [0, 0, 255]
    assert read_depth.dtype == np.uint16
    assert read_depth[0, 0] == 1500


def test_rotated_view_renders_the_same_splat():
    splat_map = make_map(np.array([[0.0, 0.0, 2.0]]), variance=1e-4)
    # Rotating the world by a yaw and undoing it in the pose leaves the image unchanged
    yaw = exp_se3([0, 0, 0, 0, 0.3, 0])
    moved = make_map(yaw.act(np.array([[0.0, 0.0, 2.0]])), variance=1e-4)
    a = rasterize(splat_map, IDENTITY, INTR)
    b = rasterize(moved, yaw.inverse(), INTR)
    assert np.allclose(a.color, b.color, atol=1e-9)
