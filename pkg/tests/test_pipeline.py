"""Metrics, end-to-end reconstruction/generation runs and output directories."""
import json
import math
import os

import pytest
import torch
from torch.testing import assert_close

from decoder_net import LatentGaussianDecoder, MultiModalLatent
from errors import DimensionMismatchError, MissingCheckpointError, ShapeMismatchError
from flow import VelocityField
from pipeline import (
    METRIC_COLUMNS,
    STAGE_REFINED,
    STAGE_RENDER,
    compute_metrics,
    infer,
    infer_reconstruct,
    metrics_from_dirs,
    psnr_from_mse,
    render_ground_truth,
    render_track,
    track_dir,
)
from schemas import PipelineConfig
from synthdata import encode_latent

LATENT_DIM = 2 * 2 * 4 * 4 * 5


def micro_decoder() -> LatentGaussianDecoder:
    return LatentGaussianDecoder(width=8, heads=2, blocks=1, upsample_stages=2, seed=0)


def run_config(tmp_path, **overrides) -> PipelineConfig:
    values = dict(output_dir=str(tmp_path), dy_values=[0.0, 2.0], clip_len=2, threads=1, euler_steps=2)
    values.update(overrides)
    return PipelineConfig(**values)


class CleanLatentOracle:
    """Velocity that carries any noise sample straight onto one fixed latent."""

    cond_dim = 0

    def __init__(self, latent: MultiModalLatent):
        self.target = latent.flatten()
        self.latent_dim = int(self.target.numel())

    def __call__(self, z, s, cond=None, extra=None):
        return (self.target - z) / (1.0 - s)


def checkerboard(size: int = 4) -> torch.Tensor:
    index = torch.arange(size)
    board = ((index.unsqueeze(0) + index.unsqueeze(1)) % 2).float()
    return board.unsqueeze(-1).expand(size, size, 3)


class TestComputeMetrics:
    def test_identical_images(self):
        rgb = torch.rand(2, 3, 4, 4, 3, generator=torch.Generator().manual_seed(0))
        report = compute_metrics(rgb, rgb.clone())
        assert list(report.frames.columns) == METRIC_COLUMNS
        assert len(report.frames) == 6
        assert math.isinf(report.min("psnr"))
        assert report.mean("rgb_l1") == 0.0

    def test_black_against_white(self):
        report = compute_metrics(torch.zeros(4, 4, 3), torch.ones(4, 4, 3))
        assert len(report.frames) == 1
        assert report.mean("psnr") == 0.0
        assert report.mean("rgb_l1") == 1.0

    def test_checkerboard_against_inverse(self):
        board = checkerboard()
        assert compute_metrics(board, 1.0 - board).mean("psnr") == 0.0

    def test_psnr_of_known_error(self):
        assert abs(psnr_from_mse(0.01) - 20.0) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            compute_metrics(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))

    def test_depth_needs_truth(self):
        with pytest.raises(DimensionMismatchError):
            compute_metrics(torch.zeros(4, 4, 3), torch.zeros(4, 4, 3), pred_depth=torch.zeros(4, 4))

    def test_iou(self):
        pred = torch.tensor([[True, True], [False, False]])
        truth = torch.tensor([[True, False], [True, False]])
        rgb = torch.zeros(2, 2, 3)
        assert abs(compute_metrics(rgb, rgb, pred_mask=pred, truth_mask=truth).mean("iou") - 1.0 / 3.0) < 1e-12

    def test_empty_masks_score_one(self):
        rgb = torch.zeros(2, 2, 3)
        empty = torch.zeros(2, 2, dtype=torch.bool)
        assert compute_metrics(rgb, rgb, pred_mask=empty, truth_mask=empty).mean("iou") == 1.0

    def test_depth_restricted_to_valid_pixels(self):
        rgb = torch.zeros(2, 2, 3)
        pred = torch.tensor([[1.0, 5.0], [2.0, 100.0]])
        truth = torch.tensor([[2.0, 5.0], [2.0, 0.0]])
        valid = torch.tensor([[True, True], [True, False]])
        report = compute_metrics(rgb, rgb, pred, truth, valid=valid)
        assert abs(report.mean("depth_l1") - 1.0 / 3.0) < 1e-12

    def test_nothing_visible(self):
        rgb = torch.zeros(2, 2, 3)
        report = compute_metrics(rgb, rgb, valid=torch.zeros(2, 2, dtype=torch.bool))
        assert math.isnan(report.mean("psnr_visible"))

    def test_summary_spells_infinity(self):
        rgb = torch.zeros(2, 2, 3)
        summary = compute_metrics(rgb, rgb).summary()
        assert summary["psnr"] == {"mean": "inf", "min": "inf"}
        assert summary["depth_l1"] == {"mean": None, "min": None}


class TestReconstruct:
    def test_tracks_and_metrics(self, small_scene, tmp_path):
        result = infer_reconstruct(run_config(tmp_path), small_scene, decoder=micro_decoder(), write=False)
        assert result.mode == "reconstruct"
        assert sorted(result.tracks) == [0.0, 2.0]
        assert result.track(0).frames.rgb.shape == (2, 2, 16, 16, 3)
        assert len(result.report.frames) == 2 * 2 * 2
        assert set(result.report.frames["dy"]) == {0.0, 2.0}

    def test_zero_offset_track_uses_the_clip_trajectory(self, small_scene, tmp_path):
        result = infer_reconstruct(run_config(tmp_path), small_scene, decoder=micro_decoder(), write=False)
        expected = render_track(result.scene4d, small_scene, small_scene.trajectory.window(0, 2), 1)
        assert torch.equal(result.track(0).frames.rgb, expected.rgb)
        assert torch.equal(result.track(0).frames.mask, expected.mask)

    def test_frames_are_numbered_from_base_t(self, small_scene, tmp_path):
        cfg = run_config(tmp_path, base_t=1, dy_values=[0.0])
        result = infer_reconstruct(cfg, small_scene, decoder=micro_decoder(), write=True)
        assert sorted(set(result.report.frames["frame"])) == [1, 2]
        assert os.path.exists(os.path.join(track_dir(str(tmp_path), 0.0), "rgb", "v1_t002.ppm"))

    def test_base_t_outside_scene(self, small_scene, tmp_path):
        with pytest.raises(ShapeMismatchError):
            infer_reconstruct(run_config(tmp_path, base_t=3), small_scene, decoder=micro_decoder(), write=False)

    def test_outputs_are_deterministic(self, small_scene, tmp_path):
        contents = []
        for name in ("a", "b"):
            cfg = run_config(tmp_path / name, dump_intermediate=True)
            infer_reconstruct(cfg, small_scene, decoder=micro_decoder())
            files = {}
            for base, _, names in os.walk(cfg.output_dir):
                for file in names:
                    path = os.path.join(base, file)
                    with open(path, "rb") as handle:
                        files[os.path.relpath(path, cfg.output_dir)] = handle.read()
            contents.append(files)
        assert "metrics.csv" in contents[0]
        assert "intermediate/latent.npy" in contents[0]
        assert "tracks/dy_2/depth/v0_t001.dpth" in contents[0]
        assert contents[0] == contents[1]

    def test_summary(self, small_scene, tmp_path):
        infer_reconstruct(run_config(tmp_path), small_scene, decoder=micro_decoder())
        with open(tmp_path / "summary.json", "r", encoding="utf-8") as handle:
            summary = json.load(handle)
        assert summary["mode"] == "reconstruct"
        assert sorted(summary["tracks"]) == ["0", "2"]
        assert "output_dir" not in summary["config"]
        assert set(summary["tracks"]["0"]) == {STAGE_RENDER}
        assert set(summary["tracks"]["0"][STAGE_RENDER]) == {"psnr", "psnr_visible", "rgb_l1", "depth_l1", "iou"}

    def test_missing_decoder_checkpoint(self, small_scene, tmp_path):
        cfg = run_config(tmp_path, decoder_checkpoint=str(tmp_path / "absent.gdec"))
        with pytest.raises(MissingCheckpointError) as info:
            infer_reconstruct(cfg, small_scene, write=False)
        assert "absent.gdec" in str(info.value)


class TestGenerate:
    def test_sampled_latent_runs_end_to_end(self, small_scene, tmp_path):
        flow = VelocityField(LATENT_DIM, width=8, hidden_layers=1, seed=0)
        result = infer(run_config(tmp_path), small_scene, flow=flow, decoder=micro_decoder(), write=False)
        assert result.mode == "generate"
        assert result.latent.data.shape == (2, 2, 4, 4, 5)
        assert float(result.latent.depth.abs().max()) <= 1.0

    def test_same_seed_same_latent(self, small_scene, tmp_path):
        flow = VelocityField(LATENT_DIM, width=8, hidden_layers=1, seed=0)
        first = infer(run_config(tmp_path, seed=5), small_scene, flow=flow, decoder=micro_decoder(), write=False)
        second = infer(run_config(tmp_path, seed=5), small_scene, flow=flow, decoder=micro_decoder(), write=False)
        other = infer(run_config(tmp_path, seed=6), small_scene, flow=flow, decoder=micro_decoder(), write=False)
        assert torch.equal(first.latent.data, second.latent.data)
        assert not torch.equal(first.latent.data, other.latent.data)

    def test_refined_frames_are_scored(self, small_scene, tmp_path):
        flow = VelocityField(LATENT_DIM, width=8, hidden_layers=1, seed=0)
        refiner = VelocityField(LATENT_DIM, extra_dim=LATENT_DIM, width=8, hidden_layers=1, seed=1)
        result = infer(run_config(tmp_path), small_scene, flow=flow, decoder=micro_decoder(), refiner=refiner)
        track = result.track(2.0)
        assert track.refined.rgb.shape == (2, 2, 16, 16, 3)
        assert track.refined.depth.shape == (2, 2, 16, 16)
        assert track.refined.mask.dtype == torch.bool
        assert float(track.refined.rgb.min()) >= 0.0 and float(track.refined.rgb.max()) <= 1.0
        assert track.final is track.refined

        frames = result.report.frames
        assert set(frames["stage"]) == {STAGE_RENDER, STAGE_REFINED}
        assert len(frames) == 2 * 2 * 2 * 2
        refined = result.report.select(2.0, STAGE_REFINED)
        expected = compute_metrics(
            track.refined.rgb, track.truth.rgb, track.refined.depth, track.truth.depth,
            track.refined.mask, track.truth.mask, valid=track.truth.alpha > 0.5,
        )
        assert_close(
            torch.tensor(refined.frames["rgb_l1"].to_numpy()),
            torch.tensor(expected.frames["rgb_l1"].to_numpy()),
        )

        directory = track_dir(str(tmp_path), 2.0)
        assert os.path.exists(os.path.join(directory, "refined", "rgb", "v0_t000.ppm"))
        assert os.path.exists(os.path.join(directory, "refined", "depth", "v1_t001.dpth"))
        with open(tmp_path / "summary.json", "r", encoding="utf-8") as handle:
            summary = json.load(handle)
        assert set(summary["tracks"]["2"]) == {STAGE_RENDER, STAGE_REFINED}

    def test_without_refiner_final_frames_are_renders(self, small_scene, tmp_path):
        flow = VelocityField(LATENT_DIM, width=8, hidden_layers=1, seed=0)
        result = infer(run_config(tmp_path), small_scene, flow=flow, decoder=micro_decoder(), write=False)
        assert result.track(0).final is result.track(0).frames
        assert set(result.report.frames["stage"]) == {STAGE_RENDER}

    def test_clean_latent_oracle_matches_reconstruction(self, small_scene, tmp_path):
        decoder = micro_decoder()
        cfg = run_config(tmp_path, base_t=1)
        clean = encode_latent(small_scene, decoder.factor).window(1, 2)
        generated = infer(cfg, small_scene, flow=CleanLatentOracle(clean), decoder=decoder, write=False)
        reconstructed = infer_reconstruct(cfg, small_scene, decoder=decoder, write=False)

        assert_close(generated.latent.data, reconstructed.latent.data, atol=1e-12, rtol=0)
        for dy in (0.0, 2.0):
            ours, theirs = generated.track(dy).frames, reconstructed.track(dy).frames
            assert_close(ours.rgb, theirs.rgb, atol=1e-6, rtol=0)
            assert_close(ours.depth, theirs.depth, atol=1e-5, rtol=0)
            assert torch.equal(ours.mask, theirs.mask)
        ours, theirs = generated.report.frames, reconstructed.report.frames
        assert ours[["dy", "stage", "view", "frame"]].equals(theirs[["dy", "stage", "view", "frame"]])
        for column in ("psnr", "psnr_visible", "rgb_l1", "depth_l1", "iou"):
            assert_close(
                torch.tensor(ours[column].to_numpy()), torch.tensor(theirs[column].to_numpy()),
                atol=1e-4, rtol=1e-6, equal_nan=True,
            )

    def test_flow_of_the_wrong_size(self, small_scene, tmp_path):
        flow = VelocityField(10, width=8, hidden_layers=1)
        with pytest.raises(ShapeMismatchError):
            infer(run_config(tmp_path), small_scene, flow=flow, decoder=micro_decoder(), write=False)

    def test_unconfigured_flow(self, small_scene, tmp_path):
        with pytest.raises(MissingCheckpointError) as info:
            infer(run_config(tmp_path), small_scene, decoder=micro_decoder(), write=False)
        assert "flow_checkpoint" in str(info.value)


class TestFrameDirectories:
    def test_ground_truth_against_itself(self, small_scene, tmp_path):
        render_ground_truth(small_scene, 0.0, str(tmp_path / "a"))
        render_ground_truth(small_scene, 0.0, str(tmp_path / "b"))
        report = metrics_from_dirs(str(tmp_path / "a"), str(tmp_path / "b"))
        assert len(report.frames) == 6
        assert report.frames["name"].iloc[0] == "v0_t000"
        assert math.isinf(report.min("psnr"))
        assert report.mean("depth_l1") == 0.0
        assert report.mean("iou") == 1.0

    def test_different_frame_sets(self, small_scene, static_scene, tmp_path):
        render_ground_truth(small_scene, 0.0, str(tmp_path / "a"))
        render_ground_truth(static_scene, 0.0, str(tmp_path / "b"))
        with pytest.raises(DimensionMismatchError):
            metrics_from_dirs(str(tmp_path / "a"), str(tmp_path / "b"))
