"""
Latent Gaussian decoder.

A multi-modal latent (downsampled rgb, normalised depth and dynamic mask per
view and frame) is concatenated with its Plücker ray map, passed through
blocks of cross-view attention, temporal attention and a feed-forward layer,
and upsampled to one raw Gaussian parameter vector per full-resolution pixel.
Training renders the aggregated 4D scene at target timesteps and compares it
with the scene's rgb, depth and dynamic masks.
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

import config
from errors import (
    CorruptForwardError,
    CorruptLatentError,
    DivergedTrainingError,
    ShapeMismatchError,
    TimestepOutOfRangeError,
)
from gaussians import (
    GAUSSIAN_CHANNELS,
    RAW_CHANNELS,
    RAW_LAYOUT,
    GaussianFrame,
    Scene4D,
    activate,
    aggregate_4d,
    classify_dynamic,
    params_to_gaussians,
    softplus_inverse,
)
from geometry import DTYPE, Camera, plucker_ray_map
from rasterizer import render

if TYPE_CHECKING:
    from synthdata import SyntheticScene

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

LATENT_CHANNELS = 5   # rgb(3) + depth(1) + mask(1)
PLUCKER_CHANNELS = 6


def normalize_depth(depth: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    return 2.0 * (depth - d_min) / (d_max - d_min) - 1.0


def denormalize_depth(value: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    return (value + 1.0) * 0.5 * (d_max - d_min) + d_min


@dataclass(eq=False)
class MultiModalLatent:
    """V×T×h×w×5 latent grid; depth is normalised over the scene's (d_min, d_max)."""

    data: torch.Tensor
    d_min: float
    d_max: float

    def __post_init__(self):
        if self.data.dim() != 5 or self.data.shape[-1] != LATENT_CHANNELS:
            raise ShapeMismatchError(f"latent must be V×T×h×w×{LATENT_CHANNELS}, got {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise CorruptLatentError("non-finite latent", channel="latent")
        if bool((self.data[..., 3].abs() > 1.0 + 1e-6).any()):
            raise CorruptLatentError("depth outside [-1, 1]", channel="depth")

    @property
    def n_views(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.data.shape[1])

    @property
    def rgb(self) -> torch.Tensor:
        return self.data[..., 0:3]

    @property
    def depth(self) -> torch.Tensor:
        return self.data[..., 3]

    @property
    def mask(self) -> torch.Tensor:
        return self.data[..., 4]

    def flatten(self) -> torch.Tensor:
        return self.data.reshape(-1)

    def window(self, start: int, length: int) -> "MultiModalLatent":
        return MultiModalLatent(self.data[:, start:start + length], self.d_min, self.d_max)

    @classmethod
    def from_flat(cls, vector: torch.Tensor, shape, d_min: float, d_max: float) -> "MultiModalLatent":
        """Rebuild from a sampled vector, clamping depth back into [-1, 1]."""
        data = vector.to(DTYPE).reshape(shape).clone()
        data[..., 3] = torch.clamp(data[..., 3], -1.0, 1.0)
        return cls(data, d_min, d_max)


def encode_frames(
    rgb: torch.Tensor,
    depth: torch.Tensor,
    alpha: torch.Tensor,
    mask: torch.Tensor,
    downsample: int,
    d_min: float,
    d_max: float,
) -> MultiModalLatent:
    """Box-downsample rgb and depth, max-pool the mask; pixels with alpha ≤ 0.5 read as d_max."""
    views, frames, height, width = depth.shape
    if height % downsample or width % downsample:
        raise ShapeMismatchError(f"downsample {downsample} does not divide {height}x{width}")
    depth = torch.where(alpha.to(DTYPE) > 0.5, depth.to(DTYPE), torch.full_like(depth, d_max, dtype=DTYPE))
    depth_n = torch.clamp(normalize_depth(depth, d_min, d_max), -1.0, 1.0)
    planes = torch.cat([rgb.to(DTYPE), depth_n.unsqueeze(-1)], dim=-1)
    planes = rearrange(planes, "v t h w c -> (v t) c h w")
    pooled = F.avg_pool2d(planes, downsample) if downsample > 1 else planes
    mask_planes = rearrange(mask.to(DTYPE), "v t h w -> (v t) 1 h w")
    mask_pooled = F.max_pool2d(mask_planes, downsample) if downsample > 1 else mask_planes
    data = torch.cat([pooled, mask_pooled], dim=1)
    data = rearrange(data, "(v t) c h w -> v t h w c", v=views, t=frames)
    return MultiModalLatent(data.contiguous(), d_min, d_max)


def latent_to_frames(
    latent: MultiModalLatent,
    upsample: int,
    mask_threshold: float = config.MASK_THRESHOLD,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bilinear-upsample a latent back to pixel frames.

    Returns rgb clamped to [0, 1], ray-length depth, alpha and a boolean mask,
    all V×T×H×W(×3). Pixels whose depth reads as d_max are empty (alpha 0),
    mirroring ``encode_frames``.
    """
    planes = rearrange(latent.data, "v t h w c -> (v t) c h w")
    if upsample > 1:
        planes = F.interpolate(planes, scale_factor=upsample, mode="bilinear", align_corners=False)
    planes = rearrange(planes, "(v t) c h w -> v t h w c", v=latent.n_views, t=latent.n_frames)
    depth_n = torch.clamp(planes[..., 3], -1.0, 1.0)
    rgb = torch.clamp(planes[..., 0:3], 0.0, 1.0)
    depth = denormalize_depth(depth_n, latent.d_min, latent.d_max)
    alpha = (depth_n < 1.0).to(planes.dtype)
    return rgb, depth, alpha, planes[..., 4] > mask_threshold


class CrossViewAttention(nn.Module):
    """Self-attention over all views' pixels of one frame: B×V×T×H×W×C → same."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.width = width
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 6 or x.shape[-1] != self.width:
            raise ShapeMismatchError(f"expected B×V×T×H×W×{self.width}, got {tuple(x.shape)}")
        b, v, t, h, w, _ = x.shape
        tokens = rearrange(x, "b v t h w c -> (b t) (v h w) c")
        normed = self.norm(tokens)
        attended, _ = self.attn(normed, normed, normed, need_weights=False)
        return rearrange(tokens + attended, "(b t) (v h w) c -> b v t h w c", b=b, t=t, v=v, h=h, w=w)


class TemporalAttention(nn.Module):
    """Self-attention across frames for each view and pixel."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.width = width
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 6 or x.shape[-1] != self.width:
            raise ShapeMismatchError(f"expected B×V×T×H×W×{self.width}, got {tuple(x.shape)}")
        b, v, t, h, w, _ = x.shape
        tokens = rearrange(x, "b v t h w c -> (b v h w) t c")
        normed = self.norm(tokens)
        attended, _ = self.attn(normed, normed, normed, need_weights=False)
        return rearrange(tokens + attended, "(b v h w) t c -> b v t h w c", b=b, v=v, h=h, w=w)


def cross_view_attention(tensor: torch.Tensor, params: CrossViewAttention) -> torch.Tensor:
    return params(tensor)


def temporal_attention(tensor: torch.Tensor, params: TemporalAttention) -> torch.Tensor:
    return params(tensor)


class DecoderBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.cross_view = CrossViewAttention(width, heads)
        self.temporal = TemporalAttention(width, heads)
        self.norm = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.SiLU(), nn.Linear(2 * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.temporal(self.cross_view(x))
        return x + self.ffn(self.norm(x))


def initial_head_bias() -> torch.Tensor:
    """Raw outputs of an untrained head: identity rotation, fixed depth and scale, mostly static."""
    bias = torch.zeros(RAW_CHANNELS, dtype=DTYPE)
    bias[RAW_LAYOUT["rot"]] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    bias[RAW_LAYOUT["scale"]] = math.log(config.DECODER_INIT_SCALE)
    bias[RAW_LAYOUT["opacity"]] = 2.0
    bias[RAW_LAYOUT["depth"]] = softplus_inverse(torch.tensor(config.DECODER_INIT_DEPTH - config.D_MIN, dtype=DTYPE))
    bias[RAW_LAYOUT["mask"]] = -2.0
    return bias


class LatentGaussianDecoder(nn.Module):
    """D_φ: latent + Plücker rays → raw per-pixel Gaussian parameters."""

    def __init__(
        self,
        latent_channels: int = LATENT_CHANNELS,
        width: int = config.DECODER_WIDTH,
        heads: int = config.DECODER_HEADS,
        blocks: int = config.DECODER_BLOCKS,
        upsample_stages: int = config.DECODER_UPSAMPLE_STAGES,
        seed: int = 0,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.width = width
        self.heads = heads
        self.n_blocks = blocks
        self.upsample_stages = upsample_stages
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = nn.Linear(latent_channels + PLUCKER_CHANNELS, width)
            self.blocks = nn.ModuleList([DecoderBlock(width, heads) for _ in range(blocks)])
            self.upsample = nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in range(upsample_stages)])
            self.head = nn.Conv2d(width + latent_channels + PLUCKER_CHANNELS, RAW_CHANNELS, 1)
        self.double()
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.copy_(initial_head_bias())

    @property
    def factor(self) -> int:
        return 2 ** self.upsample_stages

    @property
    def layer_sizes(self) -> List[int]:
        return [self.latent_channels, self.width, self.heads, self.n_blocks, self.upsample_stages]

    def forward(self, latent: torch.Tensor, rays_low: torch.Tensor, rays_full: torch.Tensor) -> torch.Tensor:
        """B×V×T×h×w×C latents, B×V×T×h×w×6 and B×V×T×H×W×6 rays → B×V×T×H×W×16."""
        b, v, t, h, w, _ = latent.shape
        x = self.stem(torch.cat([latent, rays_low], dim=-1))
        for block in self.blocks:
            x = block(x)
        features = rearrange(x, "b v t h w c -> (b v t) c h w")
        for conv in self.upsample:
            features = F.silu(conv(F.interpolate(features, scale_factor=2, mode="nearest")))
        skip = rearrange(latent, "b v t h w c -> (b v t) c h w")
        skip = F.interpolate(skip, scale_factor=self.factor, mode="nearest")
        full = rearrange(rays_full, "b v t h w c -> (b v t) c h w")
        raw = self.head(torch.cat([features, skip, full], dim=1))
        return rearrange(raw, "(b v t) c h w -> b v t h w c", b=b, v=v, t=t)


def camera_rays(cameras: Sequence[Camera], factor: int = 1) -> torch.Tensor:
    """V×H×W×6 Plücker channels of the rig cameras (ego frame) at 1/factor resolution."""
    maps = []
    for cam in cameras:
        cam = cam.scaled(factor) if factor > 1 else cam
        maps.append(plucker_ray_map(cam.intrinsics, cam.pose).as_channels())
    return torch.stack(maps)


def decode(latent: MultiModalLatent, cameras: Sequence[Camera], params: LatentGaussianDecoder) -> torch.Tensor:
    """Raw parameters V×T×H×W×16 for every view and frame of the latent."""
    if len(cameras) != latent.n_views:
        raise ShapeMismatchError(f"{len(cameras)} cameras for a {latent.n_views}-view latent")
    rays_low = camera_rays(cameras, params.factor)
    rays_full = camera_rays(cameras)
    if tuple(rays_low.shape[1:3]) != tuple(latent.data.shape[2:4]):
        raise ShapeMismatchError(
            f"latent grid {tuple(latent.data.shape[2:4])} does not match camera grid {tuple(rays_low.shape[1:3])}"
        )
    frames = latent.n_frames
    rays_low = rays_low.unsqueeze(1).expand(-1, frames, -1, -1, -1)
    rays_full = rays_full.unsqueeze(1).expand(-1, frames, -1, -1, -1)
    raw = params(latent.data.unsqueeze(0), rays_low.unsqueeze(0), rays_full.unsqueeze(0))[0]
    if not bool(torch.isfinite(raw).all()):
        raise CorruptForwardError("decoder produced non-finite parameters")
    return raw


def decode_frames(raw: torch.Tensor, cameras: Sequence[Camera], threshold: float = config.MASK_THRESHOLD) -> List[GaussianFrame]:
    """Per-view, per-frame Gaussians in the ego frame, ordered frame-major then view."""
    frames = []
    for t in range(raw.shape[1]):
        for v, cam in enumerate(cameras):
            rays = plucker_ray_map(cam.intrinsics, cam.pose)
            frames.append(params_to_gaussians(raw[v, t], rays, cam.pose, t=t, view_id=cam.id, threshold=threshold))
    return frames


def gaussian_grid(raw: torch.Tensor, cameras: Sequence[Camera]) -> torch.Tensor:
    """Activated V×T×H×W×(14 + 1) tensor: Gaussian rows (μ, r, s, α, c) plus the mask logit."""
    views, frames, height, width, _ = raw.shape
    out = []
    for v, cam in enumerate(cameras):
        rays = plucker_ray_map(cam.intrinsics, cam.pose)
        per_frame = []
        for t in range(frames):
            rows = activate(raw[v, t], rays, cam.pose).to_rows().reshape(height, width, GAUSSIAN_CHANNELS)
            per_frame.append(torch.cat([rows, raw[v, t, ..., RAW_LAYOUT["mask"]]], dim=-1))
        out.append(torch.stack(per_frame))
    return torch.stack(out)


class GradientL1Perceptual:
    """Perceptual-loss stand-in: L1 between horizontal and vertical image gradients."""

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        dx = lambda img: img[:, 1:] - img[:, :-1]
        dy = lambda img: img[1:] - img[:-1]
        return (dx(pred) - dx(target)).abs().mean() + (dy(pred) - dy(target)).abs().mean()


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = config.LAMBDA_PERCEPTUAL
    depth: float = config.LAMBDA_DEPTH
    seg: float = config.LAMBDA_SEG


@dataclass
class LossTerms:
    total: torch.Tensor
    rgb: float
    perceptual: float
    depth: float
    seg: float
    psnr: float
    iou: float


def _check_targets(scene: "SyntheticScene", base_t: int, clip_len: int, target_ts: Sequence[int]) -> None:
    if base_t < 0 or base_t + clip_len > scene.n_frames:
        raise TimestepOutOfRangeError(f"clip [{base_t}, {base_t + clip_len}) outside {scene.n_frames} frames")
    for t in target_ts:
        if not base_t <= t < base_t + clip_len:
            raise TimestepOutOfRangeError(f"target timestep {t} outside clip [{base_t}, {base_t + clip_len})")


def render_loss(
    scene4d: Scene4D,
    mask_logits: torch.Tensor,
    scene: "SyntheticScene",
    base_t: int,
    target_ts: Sequence[int],
    weights: LossWeights = LossWeights(),
    perceptual: Optional[Callable] = None,
) -> LossTerms:
    """Render the 4D scene at each target timestep and camera and score it.

    ``mask_logits`` is V×L×H×W for the clip starting at ``base_t``; ``scene4d``
    holds one set per clip frame.
    """
    _check_targets(scene, base_t, len(scene4d), target_ts)
    perceptual = perceptual or GradientL1Perceptual()
    totals = {"rgb": 0.0, "perceptual": 0.0, "depth": 0.0, "seg": 0.0, "mse": 0.0}
    total = torch.zeros((), dtype=DTYPE)
    inter = union = 0
    count = 0
    for t in target_ts:
        for v, cam in enumerate(scene.cameras):
            pose = scene.trajectory[t].compose(cam.pose)
            out = render(
                scene4d[t - base_t], cam.intrinsics, pose, scene.background,
                thresholds=False, differentiable=True,
            )
            gt_rgb = scene.rgb[v, t].to(DTYPE)
            gt_depth = scene.depth[v, t].to(DTYPE)
            valid = scene.alpha[v, t] > 0.5
            gt_mask = scene.mask[v, t].to(DTYPE)
            logits = mask_logits[v, t - base_t]

            l_rgb = (out.rgb - gt_rgb).abs().mean()
            l_perc = perceptual(out.rgb, gt_rgb) if weights.perceptual else torch.zeros((), dtype=DTYPE)
            l_depth = (out.depth - gt_depth).abs()[valid].mean() if bool(valid.any()) else torch.zeros((), dtype=DTYPE)
            l_seg = F.binary_cross_entropy_with_logits(logits, gt_mask)
            total = total + l_rgb + weights.perceptual * l_perc + weights.depth * l_depth + weights.seg * l_seg

            totals["rgb"] += float(l_rgb)
            totals["perceptual"] += float(l_perc)
            totals["depth"] += float(l_depth)
            totals["seg"] += float(l_seg)
            totals["mse"] += float(((out.rgb.detach() - gt_rgb) ** 2).mean())
            predicted = classify_dynamic(logits.detach())
            truth = scene.mask[v, t].bool()
            inter += int((predicted & truth).sum())
            union += int((predicted | truth).sum())
            count += 1
    mse = totals["mse"] / count
    return LossTerms(
        total=total / count,
        rgb=totals["rgb"] / count,
        perceptual=totals["perceptual"] / count,
        depth=totals["depth"] / count,
        seg=totals["seg"] / count,
        psnr=math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse),
        iou=1.0 if union == 0 else inter / union,
    )


def scene_latent(scene: "SyntheticScene", factor: int) -> MultiModalLatent:
    return encode_frames(scene.rgb, scene.depth, scene.alpha, scene.mask, factor, scene.d_min, scene.d_max)


def decode_to_scene(
    model: LatentGaussianDecoder,
    latent: MultiModalLatent,
    cameras: Sequence[Camera],
    trajectory,
) -> Tuple[Scene4D, torch.Tensor]:
    """Decode a clip and aggregate it; returns the Scene4D and V×L×H×W mask logits."""
    raw = decode(latent, cameras, model)
    scene4d = aggregate_4d(decode_frames(raw, cameras), trajectory)
    return scene4d, raw[..., RAW_LAYOUT["mask"]].squeeze(-1)


def _objective(model, scene, latent, base_t, target_ts, weights, clip_len, perceptual) -> LossTerms:
    _check_targets(scene, base_t, clip_len, target_ts)
    scene4d, mask_logits = decode_to_scene(
        model, latent.window(base_t, clip_len), scene.cameras, scene.trajectory.window(base_t, clip_len)
    )
    return render_loss(scene4d, mask_logits, scene, base_t, target_ts, weights, perceptual)


def decoder_loss(
    params: LatentGaussianDecoder,
    scene: "SyntheticScene",
    base_t: int,
    target_ts: Sequence[int],
    weights: LossWeights = LossWeights(),
    clip_len: int = config.DECODER_CLIP_LEN,
    perceptual: Optional[Callable] = None,
    latent: Optional[MultiModalLatent] = None,
):
    """Render loss of decoding the clip at ``base_t`` (L1 rgb, perceptual, depth, mask BCE) and its parameter gradients."""
    latent = latent if latent is not None else scene_latent(scene, params.factor)
    terms = _objective(params, scene, latent, base_t, target_ts, weights, clip_len, perceptual)
    grads = torch.autograd.grad(terms.total, list(params.parameters()), allow_unused=True)
    grads = tuple(torch.zeros_like(p) if g is None else g for p, g in zip(params.parameters(), grads))
    return terms.total.detach(), grads


@dataclass(frozen=True)
class DecoderOptimizerConfig:
    lr: float = config.DECODER_LR
    optimizer: str = config.DECODER_OPTIMIZER
    weights: LossWeights = LossWeights()
    clip_len: int = config.DECODER_CLIP_LEN
    n_targets: int = config.DECODER_TARGETS


def _make_optimizer(cfg: DecoderOptimizerConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=config.FLOW_MOMENTUM)
    raise ValueError(f"unknown decoder optimizer '{cfg.optimizer}'")


def train_decoder(
    scenes: Sequence["SyntheticScene"],
    steps: int = config.DECODER_TRAIN_STEPS,
    optimizer_config: DecoderOptimizerConfig = DecoderOptimizerConfig(),
    seed: int = 0,
    model: Optional[LatentGaussianDecoder] = None,
    checkpoint_path: Optional[str] = None,
    metrics_csv: Optional[str] = None,
    log_every: int = config.LOG_EVERY,
) -> Tuple[LatentGaussianDecoder, pd.DataFrame]:
    """Seeded decoder training with random base and target timesteps.

    Returns:
        The trained decoder and a DataFrame of (step, loss, psnr, iou).
    """
    from formats import save_decoder

    if not scenes:
        raise ShapeMismatchError("decoder training needs at least one scene")
    model = model or LatentGaussianDecoder(seed=seed)
    latents = [scene_latent(s, model.factor) for s in scenes]
    generator = torch.Generator().manual_seed(seed)
    optimizer = _make_optimizer(optimizer_config, model.parameters())
    clip_len = min(optimizer_config.clip_len, min(s.n_frames for s in scenes))
    history = []
    last_good = None
    logger.info(f"Training decoder on {len(scenes)} scenes for {steps} steps")
    for step in range(1, steps + 1):
        index = int(torch.randint(len(scenes), (1,), generator=generator))
        scene = scenes[index]
        base_t = int(torch.randint(scene.n_frames - clip_len + 1, (1,), generator=generator))
        n_targets = min(optimizer_config.n_targets, clip_len)
        picks = torch.randperm(clip_len, generator=generator)[:n_targets]
        target_ts = sorted(base_t + int(p) for p in picks)

        terms = _objective(
            model, scene, latents[index], base_t, target_ts, optimizer_config.weights, clip_len, None
        )
        if not bool(torch.isfinite(terms.total)):
            raise DivergedTrainingError(
                "non-finite decoder loss", step=step,
                diagnostics={"rgb": terms.rgb, "depth": terms.depth, "seg": terms.seg},
                last_good_checkpoint=last_good,
            )
        optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        optimizer.step()
        history.append({"step": step, "loss": float(terms.total), "psnr": terms.psnr, "iou": terms.iou})
        if step % log_every == 0 or step == steps:
            logger.info(
                f"decoder step {step}/{steps} loss={float(terms.total):.5f} "
                f"psnr={terms.psnr:.2f} iou={terms.iou:.3f}"
            )
        if checkpoint_path and (step % config.CHECKPOINT_EVERY == 0 or step == steps):
            save_decoder(model, checkpoint_path)
            last_good = checkpoint_path
    frame = pd.DataFrame(history, columns=["step", "loss", "psnr", "iou"])
    if metrics_csv:
        frame.to_csv(metrics_csv, index=False)
    return model, frame
