"""Tile renderer against the dense reference and closed-form single-splat cases."""
import math

import pytest
import torch
from torch.testing import assert_close

from config import MIN_TRANSMITTANCE
from conftest import vec
from gaussians import Gaussian3D, GaussianSet
from geometry import DTYPE, Intrinsics
from rasterizer import project_gaussian, render, render_reference, threshold_bound
from selftest import SELFTEST_INTRINSICS, max_render_difference, random_gaussians, threshold_excess

BACKGROUND = (0.2, 0.4, 0.6)
INTR16 = Intrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)


def _splat(mu, scale, opacity, color=(1.0, 0.0, 0.0)) -> GaussianSet:
    return GaussianSet.from_list([
        Gaussian3D(vec(*mu), vec(1.0, 0.0, 0.0, 0.0), vec(scale, scale, scale), opacity, vec(*color)),
    ])


def _hand_composite(intr, mean, variance, opacity, color, background):
    """rgb and alpha of one isotropic screen-space splat, evaluated per pixel."""
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=DTYPE) + 0.5, torch.arange(intr.width, dtype=DTYPE) + 0.5, indexing="ij"
    )
    r2 = (u - mean[0]) ** 2 + (v - mean[1]) ** 2
    alpha = torch.clamp(opacity * torch.exp(-0.5 * r2 / variance), max=0.99)
    rgb = alpha.unsqueeze(-1) * vec(*color) + (1.0 - alpha).unsqueeze(-1) * vec(*background)
    return rgb, alpha


class TestProjection:
    def test_isotropic_on_axis(self, intr64, identity_pose):
        g = Gaussian3D(vec(0.0, 0.0, 1.0), vec(1.0, 0.0, 0.0, 0.0), vec(0.1, 0.1, 0.1), 0.5, vec(1.0, 1.0, 1.0))
        splat = project_gaussian(g, intr64, identity_pose)
        assert_close(splat.mean2d, vec(32.0, 32.0))
        expected = (100.0 * 0.1 / 1.0) ** 2 + 0.3
        assert_close(splat.cov2d, torch.diag(vec(expected, expected)), atol=1e-9, rtol=0)
        assert splat.z == 1.0

    def test_behind_camera_is_culled(self, intr64, identity_pose):
        g = Gaussian3D(vec(0.0, 0.0, -2.0), vec(1.0, 0.0, 0.0, 0.0), vec(0.1, 0.1, 0.1), 0.5, vec(1.0, 1.0, 1.0))
        assert project_gaussian(g, intr64, identity_pose) is None

    def test_far_off_image_is_culled(self, intr64, identity_pose):
        g = Gaussian3D(vec(50.0, 0.0, 1.0), vec(1.0, 0.0, 0.0, 0.0), vec(0.01, 0.01, 0.01), 0.5, vec(1.0, 1.0, 1.0))
        assert project_gaussian(g, intr64, identity_pose) is None


class TestClosedForm:
    @pytest.mark.parametrize("renderer", [render, render_reference])
    def test_empty_scene_is_background(self, renderer, identity_pose):
        out = renderer(GaussianSet.empty(), INTR16, identity_pose, background=BACKGROUND)
        assert_close(out.rgb, vec(*BACKGROUND).float().expand(16, 16, 3))
        assert float(out.alpha.abs().max()) == 0.0
        assert out.rgb.dtype == torch.float32

    def test_single_splat_matches_hand_compositing(self, identity_pose):
        gs = _splat((0.0, 0.0, 5.0), 0.2, 0.5)
        out = render_reference(gs, INTR16, identity_pose, background=BACKGROUND, out_dtype=torch.float64)
        variance = (20.0 * 0.2 / 5.0) ** 2 + 0.3
        rgb, alpha = _hand_composite(INTR16, (8.0, 8.0), variance, 0.5, (1.0, 0.0, 0.0), BACKGROUND)
        assert_close(out.rgb, rgb, atol=1e-12, rtol=0)
        assert_close(out.alpha, alpha, atol=1e-12, rtol=0)
        assert_close(out.depth[8, 8], torch.tensor(5.0, dtype=DTYPE))

    def test_opaque_splat_on_pixel(self, identity_pose):
        # Centred on pixel (8, 8) of the 16×16 camera
        gs = _splat((0.5 / 20.0 * 5.0, 0.5 / 20.0 * 5.0, 5.0), 2.0, 1.0 - 1e-6)
        out = render(gs, INTR16, identity_pose, background=BACKGROUND, out_dtype=torch.float64)
        expected = 0.99 * vec(1.0, 0.0, 0.0) + 0.01 * vec(*BACKGROUND)
        assert_close(out.rgb[8, 8], expected, atol=1e-9, rtol=0)
        assert_close(out.alpha[8, 8], torch.tensor(0.99, dtype=DTYPE), atol=1e-9, rtol=0)

    def test_front_splat_occludes_back(self, identity_pose):
        front = _splat((0.0, 0.0, 3.0), 1.0, 1.0 - 1e-6, (0.0, 1.0, 0.0))
        back = _splat((0.0, 0.0, 6.0), 3.0, 1.0 - 1e-6, (1.0, 0.0, 0.0))
        out = render(GaussianSet.cat([back, front]), INTR16, identity_pose, out_dtype=torch.float64)
        # 0.99 green in front, then 0.99 of the remaining 0.01 red
        assert_close(out.rgb[8, 8], vec(0.99 * 0.01, 0.99, 0.0), atol=1e-6, rtol=0)


class TestTiledEquivalence:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_reference_without_thresholds(self, seed, identity_pose):
        gen = torch.Generator().manual_seed(seed)
        gs = random_gaussians(gen, 150)
        tiled = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, thresholds=False, out_dtype=DTYPE)
        dense = render_reference(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, out_dtype=DTYPE)
        assert_close(tiled.rgb, dense.rgb, atol=1e-6, rtol=0)
        assert_close(tiled.alpha, dense.alpha, atol=1e-6, rtol=0)
        covered = dense.alpha > 1e-3
        assert_close(tiled.depth[covered], dense.depth[covered], atol=1e-6, rtol=0)
        assert max_render_difference(tiled, dense) <= 1e-6

    @pytest.mark.parametrize("seed", range(2))
    def test_tiling_adds_nothing_under_thresholds(self, seed, identity_pose):
        gen = torch.Generator().manual_seed(seed)
        gs = random_gaussians(gen, 150)
        tiled = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, out_dtype=DTYPE)
        dense = render_reference(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, thresholds=True, out_dtype=DTYPE)
        assert max_render_difference(tiled, dense) <= 1e-6

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("n", [150, 500])
    def test_default_render_within_threshold_bound(self, seed, n, identity_pose):
        gen = torch.Generator().manual_seed(seed)
        gs = random_gaussians(gen, n)
        tiled = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, out_dtype=DTYPE)
        exact = render_reference(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, out_dtype=DTYPE)
        bound = threshold_bound(gs, SELFTEST_INTRINSICS, identity_pose)
        assert threshold_excess(tiled, exact, bound) <= 1e-9

    @pytest.mark.parametrize("tile_size", [4, 8, 13])
    def test_tile_size_invariance(self, tile_size, identity_pose, generator):
        gs = random_gaussians(generator, 120)
        base = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, thresholds=False, tile_size=16, out_dtype=DTYPE)
        other = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, thresholds=False, tile_size=tile_size, out_dtype=DTYPE)
        assert_close(other.rgb, base.rgb, atol=1e-9, rtol=0)
        assert_close(other.alpha, base.alpha, atol=1e-9, rtol=0)

    def test_worker_count_determinism(self, identity_pose, generator):
        gs = random_gaussians(generator, 200)
        single = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, workers=1)
        pooled = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND, workers=4)
        assert torch.equal(single.rgb, pooled.rgb)
        assert torch.equal(single.depth, pooled.depth)
        assert torch.equal(single.alpha, pooled.alpha)

    def test_zero_opacity_splat_changes_nothing(self, identity_pose, generator):
        gs = random_gaussians(generator, 80)
        ghost = _splat((0.0, 0.0, 4.0), 0.5, 0.0)
        before = render(gs, SELFTEST_INTRINSICS, identity_pose, BACKGROUND)
        after = render(GaussianSet.cat([gs, ghost]), SELFTEST_INTRINSICS, identity_pose, BACKGROUND)
        assert torch.equal(before.rgb, after.rgb)
        assert torch.equal(before.depth, after.depth)
        assert after.diagnostics.skipped == 1

    def test_contributor_indexes_input(self, identity_pose):
        gs = GaussianSet.cat([_splat((0.0, 0.0, 50.0), 0.01, 0.5), _splat((0.0, 0.0, 5.0), 1.0, 0.9)])
        out = render(gs, INTR16, identity_pose, return_contributor=True)
        assert int(out.contributor[8, 8]) == 1
        assert int(out.contributor[0, 0]) in (-1, 1)


class TestThresholdBound:
    def test_unskipped_pixel_only_allows_early_out(self, identity_pose):
        gs = _splat((0.5 / 20.0 * 5.0, 0.5 / 20.0 * 5.0, 5.0), 2.0, 1.0 - 1e-6)
        bound = threshold_bound(gs, INTR16, identity_pose)
        assert float(bound.colour[8, 8]) == MIN_TRANSMITTANCE
        assert math.isfinite(float(bound.depth[8, 8]))

    def test_faint_tails_dropped_by_default_are_covered(self, identity_pose):
        # Ten splats each below the 1/255 skip cutoff everywhere
        gs = GaussianSet.cat([_splat((0.0, 0.0, 5.0), 0.2, 0.003) for _ in range(10)])
        tiled = render(gs, INTR16, identity_pose, out_dtype=DTYPE)
        exact = render_reference(gs, INTR16, identity_pose, out_dtype=DTYPE)
        bound = threshold_bound(gs, INTR16, identity_pose)
        assert float(tiled.alpha[8, 8]) == 0.0
        assert float(tiled.depth[8, 8]) == 0.0
        assert float(exact.alpha[8, 8]) > 0.01
        assert_close(exact.depth[8, 8], torch.tensor(5.0, dtype=DTYPE))
        assert float(bound.colour[8, 8]) >= float(exact.alpha[8, 8])
        assert float(bound.depth[8, 8]) >= 5.0
        assert threshold_excess(tiled, exact, bound) <= 1e-9

    def test_empty_scene(self, identity_pose):
        bound = threshold_bound(GaussianSet.empty(), INTR16, identity_pose)
        assert_close(bound.colour, torch.full((16, 16), MIN_TRANSMITTANCE, dtype=DTYPE))
        assert bool(torch.isinf(bound.depth).all())


class TestDifferentiable:
    def test_gradients_reach_means_and_colours(self, identity_pose):
        gs = _splat((0.2, -0.1, 5.0), 0.5, 0.7)
        gs.mu.requires_grad_(True)
        gs.color.requires_grad_(True)
        out = render(gs, INTR16, identity_pose, thresholds=False, differentiable=True)
        out.rgb.sum().backward()
        assert out.rgb.dtype == DTYPE
        assert float(gs.color.grad.abs().sum()) > 0
        assert math.isfinite(float(gs.mu.grad.abs().sum()))

    def test_opacity_and_colour_gradcheck(self, identity_pose):
        base = _splat((0.2, -0.1, 5.0), 0.5, 0.7)

        def rgb(opacity, color):
            gs = GaussianSet(base.mu, base.rot, base.scale, opacity, color)
            return render(gs, INTR16, identity_pose, thresholds=False, differentiable=True).rgb

        inputs = (base.opacity.clone().requires_grad_(True), base.color.clone().requires_grad_(True))
        assert torch.autograd.gradcheck(rgb, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)
