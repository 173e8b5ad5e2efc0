"""Synthetic scene generator: determinism, self-consistency and scene directories."""
import json
import os

import pytest
import torch
from torch.testing import assert_close

from decoder_net import normalize_depth
from errors import FormatError, UnknownCategoryError
from geometry import DTYPE
from rasterizer import render_reference
from synthdata import (
    DEGRADE_PATCH,
    clip_windows,
    degrade,
    encode_latent,
    generate_scene,
    layout_sketch,
    make_rig,
    read_manifest,
    read_rig,
    read_scene,
    shifted_truth,
    write_scene,
)


def directory_bytes(root: str) -> dict:
    contents = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as handle:
                contents[os.path.relpath(path, root)] = handle.read()
    return contents


class TestGenerateScene:
    def test_same_seed_same_scene(self, small_scene):
        again = generate_scene(7, V=2, T=3, H=16, W=16, n_static=300, n_dynamic=1)
        assert torch.equal(again.rgb, small_scene.rgb)
        assert torch.equal(again.static.to_rows(), small_scene.static.to_rows())
        assert again.conditions.tag == small_scene.conditions.tag

    def test_different_seeds_differ(self, small_scene):
        other = generate_scene(8, V=2, T=3, H=16, W=16, n_static=300, n_dynamic=1)
        assert not torch.equal(other.rgb, small_scene.rgb)

    def test_shapes(self, small_scene):
        assert small_scene.rgb.shape == (2, 3, 16, 16, 3)
        assert small_scene.depth.shape == (2, 3, 16, 16)
        assert small_scene.mask.dtype == torch.bool
        assert len(small_scene.dynamic[0]) == 40
        assert small_scene.d_min < small_scene.d_max

    def test_targets_are_reference_renders(self, small_scene):
        cam = small_scene.cameras[1]
        pose = small_scene.trajectory[2].compose(cam.pose)
        out = render_reference(small_scene.gaussians_at(2), cam.intrinsics, pose, small_scene.background)
        assert torch.equal(out.rgb, small_scene.rgb[1, 2])
        assert torch.equal(out.depth, small_scene.depth[1, 2])

    def test_static_scene_has_no_masks(self, static_scene):
        assert not bool(static_scene.mask.any())
        assert static_scene.conditions.boxes == [[], []]
        assert torch.equal(static_scene.gaussians_at(0).to_rows(), static_scene.gaussians_at(1).to_rows())

    def test_boxes_contain_vehicles(self, small_scene):
        for t in range(small_scene.n_frames):
            (box,) = small_scene.conditions.boxes[t]
            assert bool(box.contains(small_scene.vehicle_gaussians(t, 0).mu).all())

    def test_vehicle_moves(self, small_scene):
        first = small_scene.vehicle_gaussians(0, 0).mu.mean(dim=0)
        last = small_scene.vehicle_gaussians(2, 0).mu.mean(dim=0)
        assert float(last[0] - first[0]) > 1.0

    @pytest.mark.parametrize("kwargs", [{"V": 0}, {"H": 0}, {"n_static": -1}])
    def test_rejects_bad_dimensions(self, kwargs):
        with pytest.raises(ValueError):
            generate_scene(0, **kwargs)

    def test_empty_scene_is_background(self):
        scene = generate_scene(0, V=1, T=1, H=8, W=8, n_static=0, n_dynamic=0)
        background = torch.tensor(scene.background, dtype=torch.float32)
        assert_close(scene.rgb[0, 0], background.expand(8, 8, 3))

    def test_rig_cameras_share_intrinsics(self):
        cameras = make_rig(3, 16, 32)
        assert [c.id for c in cameras] == ["cam0", "cam1", "cam2"]
        assert cameras[0].intrinsics.cx == 16.0 and cameras[0].intrinsics.cy == 8.0


class TestLayoutSketch:
    def test_lane_runs_along_ego_x(self, small_scene):
        sketch = layout_sketch(small_scene.trajectory[0])
        lane = sketch.grid[0]
        assert int(lane[:, 31].sum()) == 64
        assert int(lane[:, 0].sum()) == 0


class TestEncodeLatent:
    def test_shape_and_depth_range(self, small_scene):
        latent = encode_latent(small_scene, 4)
        assert latent.data.shape == (2, 3, 4, 4, 5)
        assert float(latent.depth.abs().max()) <= 1.0

    def test_full_resolution_keeps_targets(self, small_scene):
        latent = encode_latent(small_scene, 1)
        assert torch.equal(latent.rgb, small_scene.rgb.to(DTYPE))
        visible = small_scene.alpha > 0.5
        expected = normalize_depth(small_scene.depth.to(DTYPE), small_scene.d_min, small_scene.d_max)
        assert_close(latent.depth[visible], expected[visible])
        assert torch.equal(latent.mask, small_scene.mask.to(DTYPE))

    def test_clip_windows(self, small_scene):
        windows = clip_windows(small_scene, 2, 4)
        assert len(windows) == 2
        vector, conditions = windows[1]
        assert vector.shape == (2 * 2 * 4 * 4 * 5,)
        assert len(conditions.trajectory) == 2
        assert torch.equal(conditions.trajectory[0].translation, small_scene.trajectory[1].translation)


class TestDegrade:
    def test_none_is_a_copy(self, small_scene):
        out = degrade(small_scene.rgb, "none")
        assert torch.equal(out, small_scene.rgb)
        assert out is not small_scene.rgb

    def test_mask_patch_zeroes_the_centre(self, small_scene):
        out = degrade(small_scene.rgb, "mask_patch")
        half = DEGRADE_PATCH // 2
        assert float(out[..., 8 - half:8 + half, 8 - half:8 + half, :].abs().max()) == 0.0
        assert torch.equal(out[..., 0, 0, :], small_scene.rgb[..., 0, 0, :])

    def test_blur_keeps_constant_images(self):
        flat = torch.full((2, 3, 8, 8, 3), 0.25)
        assert_close(degrade(flat, "box_blur"), flat)

    def test_blur_spreads_a_spike(self):
        spike = torch.zeros(1, 1, 5, 5, 3)
        spike[0, 0, 2, 2] = 9.0
        out = degrade(spike, "box_blur")
        assert_close(out[0, 0, 1:4, 1:4], torch.ones(3, 3, 3))
        assert float(out[0, 0, 0, 0].abs().max()) == 0.0

    def test_unknown_kind(self, small_scene):
        with pytest.raises(UnknownCategoryError):
            degrade(small_scene.rgb, "jpeg")


class TestShiftedTruth:
    def test_zero_offset_returns_targets(self, small_scene):
        assert shifted_truth(small_scene, 0.0) is small_scene.targets

    def test_offset_changes_views(self, small_scene):
        shifted = shifted_truth(small_scene, 2.0)
        assert shifted.rgb.shape == small_scene.rgb.shape
        assert not torch.equal(shifted.rgb, small_scene.rgb)


class TestSceneDirectory:
    def test_roundtrip(self, small_scene, tmp_path):
        write_scene(small_scene, str(tmp_path))
        manifest = read_manifest(str(tmp_path))
        assert (manifest.views, manifest.frames, manifest.n_dynamic) == (2, 3, 1)
        loaded = read_scene(str(tmp_path))
        assert torch.equal(loaded.static.to_rows(), small_scene.static.to_rows())
        assert torch.equal(loaded.dynamic[1].to_rows(), small_scene.dynamic[1].to_rows())
        assert_close(loaded.rgb, small_scene.rgb, atol=1e-6, rtol=0)
        assert loaded.conditions.tag == small_scene.conditions.tag
        assert torch.equal(loaded.conditions.sketches[0].grid, small_scene.conditions.sketches[0].grid)

    def test_writes_are_deterministic(self, small_scene, tmp_path):
        write_scene(small_scene, str(tmp_path / "a"))
        write_scene(generate_scene(7, V=2, T=3, H=16, W=16, n_static=300, n_dynamic=1), str(tmp_path / "b"))
        first, second = directory_bytes(str(tmp_path / "a")), directory_bytes(str(tmp_path / "b"))
        assert "gaussians/t002.gs4d" in first
        assert "rgb/v1_t002.ppm" in first
        assert first == second

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            read_scene(str(tmp_path))

    def test_rig_document(self, small_scene, tmp_path):
        write_scene(small_scene, str(tmp_path))
        rig = read_rig(str(tmp_path / "rig.json"))
        assert [c.id for c in rig.cameras] == ["cam0", "cam1"]
        cameras = rig.to_cameras()
        assert cameras[1].intrinsics == small_scene.cameras[1].intrinsics
        assert_close(cameras[1].pose.rotation, small_scene.cameras[1].pose.rotation)

    def test_missing_rig(self, small_scene, tmp_path):
        write_scene(small_scene, str(tmp_path))
        os.remove(tmp_path / "rig.json")
        with pytest.raises(FormatError, match="no camera rig"):
            read_scene(str(tmp_path))

    def test_rig_with_foreign_convention(self, small_scene, tmp_path):
        write_scene(small_scene, str(tmp_path))
        path = tmp_path / "rig.json"
        rig = json.loads(path.read_text(encoding="utf-8"))
        rig["convention"] = "y-up"
        path.write_text(json.dumps(rig), encoding="utf-8")
        with pytest.raises(FormatError, match="convention"):
            read_scene(str(tmp_path))
