"""
End-to-end orchestration: sample (or encode) a clip latent, decode it into
pixel-aligned Gaussians, aggregate them into a 4D scene, render every
requested lateral track, refine the renders and score them against the
generator's ground truth.
"""
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

import config
from conditions import ConditionSet, perturb_trajectory, reproject_boxes, reproject_sketch
from decoder_net import MultiModalLatent, decode_to_scene, encode_frames, latent_to_frames
from errors import DimensionMismatchError, FormatError, MissingCheckpointError, ShapeMismatchError
from flow import Schedule, euler_sample, refine
from formats import (
    atomic_write,
    load_decoder,
    load_velocity_field,
    read_depth,
    read_pgm,
    read_ppm,
    write_csv,
    write_depth,
    write_gaussians,
    write_pgm,
    write_ppm,
)
from gaussians import GaussianSet, Scene4D
from geometry import DTYPE
from rasterizer import render
from schemas import PipelineConfig
from synthdata import SyntheticScene, TargetFrames, read_scene, shifted_truth

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["view", "frame", "psnr", "psnr_visible", "rgb_l1", "depth_l1", "iou"]

# Report stages: splatting renders and the refiner's final frames
STAGE_RENDER = "render"
STAGE_REFINED = "refined"


# --- Metrics ---

def psnr_from_mse(mse: float) -> float:
    """10·log10(1/MSE) for [0, 1] images; identical images give +inf."""
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class MetricsReport:
    """Per-frame metrics (one row per view and frame) and their aggregates."""

    frames: pd.DataFrame

    @property
    def aggregates(self) -> pd.DataFrame:
        numeric = self.frames.select_dtypes("number").drop(columns=["dy", "view", "frame"], errors="ignore")
        return pd.DataFrame({"mean": numeric.mean(), "min": numeric.min()})

    def select(self, dy: Optional[float] = None, stage: Optional[str] = None) -> "MetricsReport":
        """Rows of one track and/or stage, without the filtered columns."""
        frames = self.frames
        if dy is not None:
            frames = frames[frames["dy"] == float(dy)].drop(columns=["dy"])
        if stage is not None:
            frames = frames[frames["stage"] == stage].drop(columns=["stage"])
        return MetricsReport(frames.reset_index(drop=True))

    def mean(self, column: str) -> float:
        return float(self.frames[column].mean())

    def min(self, column: str) -> float:
        return float(self.frames[column].min())

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {
            column: {"mean": _json_number(row["mean"]), "min": _json_number(row["min"])}
            for column, row in self.aggregates.iterrows()
        }


def _json_number(value) -> Optional[Union[float, str]]:
    value = float(value)
    if math.isnan(value):
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _as_frames(tensor: Optional[torch.Tensor], image_dims: int) -> Optional[torch.Tensor]:
    """Promote a single image to a 1×1 view/frame grid."""
    if tensor is None:
        return None
    while tensor.dim() < image_dims + 2:
        tensor = tensor.unsqueeze(0)
    return tensor


def compute_metrics(
    pred_rgb: torch.Tensor,
    truth_rgb: torch.Tensor,
    pred_depth: Optional[torch.Tensor] = None,
    truth_depth: Optional[torch.Tensor] = None,
    pred_mask: Optional[torch.Tensor] = None,
    truth_mask: Optional[torch.Tensor] = None,
    valid: Optional[torch.Tensor] = None,
) -> MetricsReport:
    """Score predicted frames against ground truth.

    Args:
        pred_rgb: V×T×H×W×3 (or a single H×W×3 image) in [0, 1].
        truth_rgb: Same shape as ``pred_rgb``.
        pred_depth: Optional V×T×H×W depth in meters.
        truth_depth: Ground-truth depth, required with ``pred_depth``.
        pred_mask: Optional boolean dynamic masks.
        truth_mask: Ground-truth masks, required with ``pred_mask``.
        valid: Pixels where the ground truth is observed; restricts depth L1
            and ``psnr_visible``. Defaults to every pixel.

    Returns:
        MetricsReport with psnr, psnr_visible, rgb_l1, depth_l1 and iou per frame.
    """
    pred_rgb, truth_rgb = _as_frames(pred_rgb, 3), _as_frames(truth_rgb, 3)
    if pred_rgb.shape != truth_rgb.shape or pred_rgb.shape[-1] != 3:
        raise DimensionMismatchError(
            f"predicted rgb {tuple(pred_rgb.shape)} does not match truth {tuple(truth_rgb.shape)}"
        )
    image_shape = tuple(pred_rgb.shape[:-1])
    pred_depth, truth_depth = _as_frames(pred_depth, 2), _as_frames(truth_depth, 2)
    pred_mask, truth_mask = _as_frames(pred_mask, 2), _as_frames(truth_mask, 2)
    valid = _as_frames(valid, 2)
    for name, tensor in (("pred_depth", pred_depth), ("truth_depth", truth_depth),
                         ("pred_mask", pred_mask), ("truth_mask", truth_mask), ("valid", valid)):
        if tensor is not None and tuple(tensor.shape) != image_shape:
            raise DimensionMismatchError(f"{name} {tuple(tensor.shape)} does not match images {image_shape}")
    if (pred_depth is None) != (truth_depth is None) or (pred_mask is None) != (truth_mask is None):
        raise DimensionMismatchError("depth and mask metrics need both prediction and truth")

    pred_rgb, truth_rgb = pred_rgb.to(DTYPE), truth_rgb.to(DTYPE)
    valid = torch.ones(image_shape, dtype=torch.bool) if valid is None else valid.bool()
    rows = []
    views, frames = image_shape[0], image_shape[1]
    for v in range(views):
        for t in range(frames):
            diff = pred_rgb[v, t] - truth_rgb[v, t]
            keep = valid[v, t]
            mse = float((diff ** 2).mean())
            mse_visible = float((diff[keep] ** 2).mean()) if bool(keep.any()) else math.nan
            row = {
                "view": v,
                "frame": t,
                "psnr": psnr_from_mse(mse),
                "psnr_visible": math.nan if math.isnan(mse_visible) else psnr_from_mse(mse_visible),
                "rgb_l1": float(diff.abs().mean()),
                "depth_l1": math.nan,
                "iou": math.nan,
            }
            if pred_depth is not None and bool(keep.any()):
                err = (pred_depth[v, t].to(DTYPE) - truth_depth[v, t].to(DTYPE)).abs()
                row["depth_l1"] = float(err[keep].mean())
            if pred_mask is not None:
                p, g = pred_mask[v, t].bool(), truth_mask[v, t].bool()
                union = int((p | g).sum())
                row["iou"] = 1.0 if union == 0 else int((p & g).sum()) / union
            rows.append(row)
    return MetricsReport(pd.DataFrame(rows, columns=METRIC_COLUMNS))


# --- Model loading ---

def _load(path: Optional[str], loader: Callable, label: str):
    if not path:
        raise MissingCheckpointError(f"<{label} not configured>")
    if not os.path.exists(path):
        raise MissingCheckpointError(path)
    return loader(path)


def load_scene(cfg: PipelineConfig) -> SyntheticScene:
    if not cfg.scene_dir:
        raise FormatError("no scene directory configured (scene_dir)")
    return read_scene(cfg.scene_dir)


# --- Inference ---

@dataclass(eq=False)
class TrackOutput:
    dy: float
    frames: TargetFrames                     # rendered at full resolution
    truth: TargetFrames                      # generator ground truth on this track
    refined: Optional[TargetFrames] = None   # refiner output upsampled to full resolution
    conditions: Optional[ConditionSet] = None

    @property
    def final(self) -> TargetFrames:
        return self.refined if self.refined is not None else self.frames


@dataclass(eq=False)
class InferenceResult:
    mode: str
    base_t: int
    latent: MultiModalLatent
    scene4d: Scene4D
    tracks: Dict[float, TrackOutput] = field(default_factory=dict)
    report: Optional[MetricsReport] = None

    def track(self, dy: float) -> TrackOutput:
        return self.tracks[float(dy)]


def _clip(cfg: PipelineConfig, scene: SyntheticScene):
    clip_len = min(cfg.clip_len, scene.n_frames - cfg.base_t)
    if clip_len <= 0:
        raise ShapeMismatchError(f"base_t {cfg.base_t} is outside a {scene.n_frames}-frame scene")
    return cfg.base_t, clip_len


def _track_offsets(cfg: PipelineConfig) -> List[float]:
    offsets = [0.0]
    for dy in cfg.dy_values:
        if float(dy) not in offsets:
            offsets.append(float(dy))
    return offsets


def _condition_input(model, conditions: ConditionSet):
    if model is None or not getattr(model, "cond_dim", 0):
        return None
    encoder = getattr(model, "encoder", None)
    if encoder is None:
        return None
    if encoder.n_steps != len(conditions.trajectory):
        raise ShapeMismatchError(
            f"condition encoder expects {encoder.n_steps} timesteps, clip has {len(conditions.trajectory)}"
        )
    return [conditions]


def sample_latent(
    flow,
    shape: Sequence[int],
    conditions: ConditionSet,
    cfg: PipelineConfig,
    generator: torch.Generator,
    d_min: float,
    d_max: float,
) -> MultiModalLatent:
    """Euler-integrate seeded noise into a clip latent."""
    latent_dim = int(np.prod(shape))
    expected = getattr(flow, "latent_dim", latent_dim)
    if expected != latent_dim:
        raise ShapeMismatchError(f"flow checkpoint expects latents of length {expected}, clip needs {latent_dim}")
    eps = torch.randn(latent_dim, generator=generator, dtype=DTYPE)
    z = euler_sample(
        flow, eps, Schedule(cfg.euler_steps), _condition_input(flow, conditions), guidance=cfg.guidance_weight
    )
    return MultiModalLatent.from_flat(z, tuple(shape), d_min, d_max)


def dynamic_layer(gaussians: GaussianSet, dynamic: torch.Tensor) -> GaussianSet:
    """The same splats coloured white when dynamic and black when static."""
    flags = dynamic.to(gaussians.dtype).unsqueeze(-1).expand(-1, 3)
    return GaussianSet(gaussians.mu, gaussians.rot, gaussians.scale, gaussians.opacity, flags)


@torch.no_grad()
def render_track(
    scene4d: Scene4D,
    scene: SyntheticScene,
    trajectory,
    workers: int,
    threshold: float = config.MASK_THRESHOLD,
) -> TargetFrames:
    """Render every view of the 4D scene along ``trajectory`` (one pose per clip frame)."""
    rgb, depth, alpha, mask = [], [], [], []
    for cam in scene.cameras:
        per = ([], [], [], [])
        for t, ego in enumerate(trajectory.poses):
            pose = ego.compose(cam.pose)
            out = render(scene4d[t], cam.intrinsics, pose, scene.background, workers=workers)
            layer = render(dynamic_layer(scene4d[t], scene4d.dynamic[t]), cam.intrinsics, pose, (0.0, 0.0, 0.0), workers=workers)
            for store, value in zip(per, (out.rgb, out.depth, out.alpha, layer.rgb[..., 0] > threshold)):
                store.append(value)
        for store, values in zip((rgb, depth, alpha, mask), per):
            store.append(torch.stack(values))
    return TargetFrames(torch.stack(rgb), torch.stack(depth), torch.stack(alpha), torch.stack(mask))


def _window(frames: TargetFrames, start: int, length: int) -> TargetFrames:
    end = start + length
    return TargetFrames(
        frames.rgb[:, start:end], frames.depth[:, start:end], frames.alpha[:, start:end], frames.mask[:, start:end]
    )


def shifted_conditions(scene: SyntheticScene, clip: ConditionSet, dy: float) -> ConditionSet:
    """C' for a lateral offset: sketches resampled into the shifted ego frames, boxes unchanged in the world."""
    if dy == 0:
        return clip
    shifted = perturb_trajectory(clip.trajectory, dy)
    return ConditionSet(
        sketches=reproject_sketch(clip.sketches, clip.trajectory, shifted),
        boxes=clip.boxes,
        trajectory=shifted,
        tag=clip.tag,
    )


def _refine_track(refiner, frames: TargetFrames, conditions: ConditionSet, scene, factor, cfg, generator) -> TargetFrames:
    """Refiner pass over the encoded renders, upsampled back to the render resolution."""
    renders = encode_frames(frames.rgb, frames.depth, frames.alpha, frames.mask, factor, scene.d_min, scene.d_max)
    extra = renders.flatten()
    if refiner.extra_dim != extra.numel():
        raise ShapeMismatchError(
            f"refiner checkpoint expects {refiner.extra_dim} render channels, clip provides {extra.numel()}"
        )
    z = refine(refiner, extra, generator, Schedule(cfg.euler_steps), _condition_input(refiner, conditions))
    refined = MultiModalLatent.from_flat(z, tuple(renders.data.shape), scene.d_min, scene.d_max)
    rgb, depth, alpha, mask = latent_to_frames(refined, factor, cfg.mask_threshold)
    return TargetFrames(rgb.to(torch.float32), depth.to(torch.float32), alpha.to(torch.float32), mask)


def _score(stage: str, dy: float, base_t: int, frames: TargetFrames, truth: TargetFrames) -> pd.DataFrame:
    report = compute_metrics(
        frames.rgb, truth.rgb, frames.depth, truth.depth, frames.mask, truth.mask, valid=truth.alpha > 0.5
    )
    table = report.frames.copy()
    table.insert(0, "stage", stage)
    table.insert(0, "dy", dy)
    table["frame"] = table["frame"] + base_t
    logger.info(
        f"dy={dy:g} {stage}: psnr={report.mean('psnr'):.2f} psnr_visible={report.mean('psnr_visible'):.2f} "
        f"depth_l1={report.mean('depth_l1'):.3f} iou={report.mean('iou'):.3f}"
    )
    return table


def _run(
    cfg: PipelineConfig,
    scene: SyntheticScene,
    make_latent: Callable[[ConditionSet, int, int, torch.Generator], MultiModalLatent],
    decoder,
    refiner,
    mode: str,
    write: bool,
) -> InferenceResult:
    torch.set_num_threads(cfg.threads)
    base_t, clip_len = _clip(cfg, scene)
    generator = torch.Generator().manual_seed(cfg.seed)
    clip = scene.conditions.window(base_t, clip_len)
    logger.info(f"{mode}: scene {scene.seed}, frames [{base_t}, {base_t + clip_len}), tracks {_track_offsets(cfg)}")

    latent = make_latent(clip, base_t, clip_len, generator)
    expected_hw = (scene.height // decoder.factor, scene.width // decoder.factor)
    if tuple(latent.data.shape[2:4]) != expected_hw:
        raise ShapeMismatchError(
            f"latent grid {tuple(latent.data.shape[2:4])} does not match the decoder's {expected_hw}"
        )
    with torch.no_grad():
        scene4d, _ = decode_to_scene(decoder, latent, scene.cameras, clip.trajectory)
    scene4d = Scene4D(
        sets=[s.detach() for s in scene4d.sets], source_t=scene4d.source_t, dynamic=scene4d.dynamic
    )

    result = InferenceResult(mode=mode, base_t=base_t, latent=latent, scene4d=scene4d)
    reports = []
    for dy in _track_offsets(cfg):
        trajectory = clip.trajectory if dy == 0 else perturb_trajectory(clip.trajectory, dy)
        frames = render_track(scene4d, scene, trajectory, cfg.threads, cfg.mask_threshold)
        truth = _window(shifted_truth(scene, dy), base_t, clip_len)
        conditions = shifted_conditions(scene, clip, dy)
        refined = None
        if refiner is not None:
            refined = _refine_track(refiner, frames, conditions, scene, decoder.factor, cfg, generator)
        result.tracks[dy] = TrackOutput(dy, frames, truth, refined, conditions)

        reports.append(_score(STAGE_RENDER, dy, base_t, frames, truth))
        if refined is not None:
            reports.append(_score(STAGE_REFINED, dy, base_t, refined, truth))
    result.report = MetricsReport(pd.concat(reports, ignore_index=True))
    if write:
        write_outputs(result, scene, cfg)
    return result


def infer(
    cfg: PipelineConfig,
    scene: Optional[SyntheticScene] = None,
    flow=None,
    decoder=None,
    refiner=None,
    write: bool = True,
) -> InferenceResult:
    """Generation mode: noise → flow sample → decode → aggregate → render tracks → refine."""
    scene = scene if scene is not None else load_scene(cfg)
    if flow is None:
        flow = _load(cfg.flow_checkpoint, load_velocity_field, "flow_checkpoint")
    if decoder is None:
        decoder = _load(cfg.decoder_checkpoint, load_decoder, "decoder_checkpoint")
    if refiner is None and cfg.refiner_checkpoint:
        refiner = _load(cfg.refiner_checkpoint, load_velocity_field, "refiner_checkpoint")

    def make_latent(clip, base_t, clip_len, generator):
        shape = (scene.n_views, clip_len, scene.height // decoder.factor, scene.width // decoder.factor, 5)
        return sample_latent(flow, shape, clip, cfg, generator, scene.d_min, scene.d_max)

    return _run(cfg, scene, make_latent, decoder, refiner, "generate", write)


def infer_reconstruct(
    cfg: PipelineConfig,
    scene: Optional[SyntheticScene] = None,
    decoder=None,
    refiner=None,
    write: bool = True,
) -> InferenceResult:
    """Reconstruction mode: the clean scene latent feeds the decoder directly."""
    scene = scene if scene is not None else load_scene(cfg)
    if decoder is None:
        decoder = _load(cfg.decoder_checkpoint, load_decoder, "decoder_checkpoint")
    if refiner is None and cfg.refiner_checkpoint:
        refiner = _load(cfg.refiner_checkpoint, load_velocity_field, "refiner_checkpoint")

    def make_latent(clip, base_t, clip_len, generator):
        latent = encode_frames(scene.rgb, scene.depth, scene.alpha, scene.mask, decoder.factor, scene.d_min, scene.d_max)
        return latent.window(base_t, clip_len)

    return _run(cfg, scene, make_latent, decoder, refiner, "reconstruct", write)


# --- Outputs ---

def track_dir(output_dir: str, dy: float) -> str:
    return os.path.join(output_dir, "tracks", f"dy_{dy:g}")


def frame_name(v: int, t: int) -> str:
    return f"v{v}_t{t:03d}"


def write_frames(directory: str, frames: TargetFrames, first_t: int = 0) -> None:
    """rgb/*.ppm, depth/*.dpth and mask/*.pgm per view and frame."""
    views, steps = frames.rgb.shape[0], frames.rgb.shape[1]
    for v in range(views):
        for t in range(steps):
            stem = frame_name(v, first_t + t)
            write_ppm(os.path.join(directory, "rgb", stem + ".ppm"), frames.rgb[v, t])
            write_depth(os.path.join(directory, "depth", stem + ".dpth"), frames.depth[v, t])
            write_pgm(os.path.join(directory, "mask", stem + ".pgm"), frames.mask[v, t])


def _npy_bytes(tensor: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, tensor.detach().cpu().numpy())
    return buffer.getvalue()


def write_intermediate(result: InferenceResult, scene: SyntheticScene, directory: str) -> None:
    atomic_write(os.path.join(directory, "latent.npy"), _npy_bytes(result.latent.data))
    for t, gaussians in enumerate(result.scene4d.sets):
        write_gaussians(
            os.path.join(directory, "gaussians", f"t{result.base_t + t:03d}.gs4d"),
            gaussians, result.scene4d.dynamic[t],
        )
    boxes = {}
    for dy, track in result.tracks.items():
        per_camera = {}
        for cam in scene.cameras:
            per_frame = []
            for ego, step_boxes in zip(track.conditions.trajectory.poses, track.conditions.boxes):
                projections = reproject_boxes(step_boxes, cam.intrinsics, ego.compose(cam.pose))
                per_frame.append([p.corners.tolist() if p.any_visible else None for p in projections])
            per_camera[cam.id] = per_frame
        boxes[f"{dy:g}"] = per_camera
    atomic_write(os.path.join(directory, "boxes.json"), json.dumps(boxes, indent=2).encode("utf-8"))


def write_outputs(result: InferenceResult, scene: SyntheticScene, cfg: PipelineConfig) -> None:
    """tracks/dy_<value>/, metrics.csv, summary.json and optional intermediate/ under cfg.output_dir."""
    out = cfg.output_dir
    for dy, track in result.tracks.items():
        directory = track_dir(out, dy)
        write_frames(directory, track.frames, result.base_t)
        if track.refined is not None:
            write_frames(os.path.join(directory, STAGE_REFINED), track.refined, result.base_t)
    write_csv(os.path.join(out, "metrics.csv"), result.report.frames)
    stages = list(dict.fromkeys(result.report.frames["stage"]))
    summary = {
        "mode": result.mode,
        "scene_seed": scene.seed,
        "base_t": result.base_t,
        "frames": result.latent.n_frames,
        "tracks": {
            f"{dy:g}": {stage: result.report.select(dy, stage).summary() for stage in stages}
            for dy in result.tracks
        },
        # Must not depend on the output location
        "config": cfg.model_dump(exclude={"output_dir"}),
    }
    atomic_write(os.path.join(out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True).encode("utf-8"))
    if cfg.dump_intermediate:
        write_intermediate(result, scene, os.path.join(out, "intermediate"))
    logger.info(f"Wrote {len(result.tracks)} tracks to {out}")


def render_ground_truth(scene: SyntheticScene, dy: float, directory: str) -> TargetFrames:
    """Reference render of the scene's own Gaussians along a shifted track, written like a scene directory."""
    frames = shifted_truth(scene, dy)
    write_frames(directory, frames)
    return frames


def _stems(directory: str) -> List[str]:
    return sorted(os.path.splitext(n)[0] for n in os.listdir(os.path.join(directory, "rgb")) if n.endswith(".ppm"))


def _stack_files(directory: str, sub: str, stems: Sequence[str], ext: str, reader) -> Optional[torch.Tensor]:
    paths = [os.path.join(directory, sub, s + ext) for s in stems]
    if not all(os.path.exists(p) for p in paths):
        return None
    return torch.stack([reader(p) for p in paths]).unsqueeze(0)


def metrics_from_dirs(pred_dir: str, truth_dir: str) -> MetricsReport:
    """Compare two frame directories (rgb/, depth/, mask/) file by file."""
    stems = _stems(pred_dir)
    if stems != _stems(truth_dir):
        raise DimensionMismatchError(f"{pred_dir} and {truth_dir} hold different frame sets")
    pred_rgb = _stack_files(pred_dir, "rgb", stems, ".ppm", read_ppm)
    truth_rgb = _stack_files(truth_dir, "rgb", stems, ".ppm", read_ppm)
    pred_depth = _stack_files(pred_dir, "depth", stems, ".dpth", read_depth)
    truth_depth = _stack_files(truth_dir, "depth", stems, ".dpth", read_depth)
    if pred_depth is None or truth_depth is None:
        pred_depth = truth_depth = None
    pred_mask = _stack_files(pred_dir, "mask", stems, ".pgm", read_pgm)
    truth_mask = _stack_files(truth_dir, "mask", stems, ".pgm", read_pgm)
    if pred_mask is None or truth_mask is None:
        pred_mask = truth_mask = None
    else:
        pred_mask, truth_mask = pred_mask > 0.5, truth_mask > 0.5
    report = compute_metrics(pred_rgb, truth_rgb, pred_depth, truth_depth, pred_mask, truth_mask)
    report.frames.insert(0, "name", [stems[i] for i in report.frames["frame"]])
    return report
