"""
Tile-based Gaussian splatting with a dense reference renderer.

Both renderers share projection, culling and the per-pixel compositing rule;
they differ only in which splats each pixel visits. The tiled renderer bins
splats into square tiles using the ellipse outside of which a splat's alpha
falls below the skip cutoff, so it visits exactly the splats the reference
would not skip. ``threshold_bound`` gives the per-pixel drift between a
default thresholded render and the exact reference.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import torch

import config
from gaussians import Gaussian3D, GaussianSet
from geometry import DTYPE, Intrinsics, PoseSE3, as_tensor

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# Pixels per chunk for the dense reference renderer
REFERENCE_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class SplatProjection:
    """One Gaussian projected to the image plane."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    z: float
    ray_depth: float
    color: torch.Tensor
    opacity: float


@dataclass(eq=False)
class ProjectedSplats:
    """Batched projections of the splats that survived culling."""

    mean2d: torch.Tensor     # N×2
    cov2d: torch.Tensor      # N×2×2
    conic: torch.Tensor      # N×3 (a, b, c) of cov2d⁻¹
    z: torch.Tensor          # N camera-frame depth
    ray_depth: torch.Tensor  # N distance from the camera centre
    color: torch.Tensor      # N×3
    opacity: torch.Tensor    # N
    index: torch.Tensor      # N positions in the input set

    def __len__(self) -> int:
        return int(self.z.shape[0])

    def __getitem__(self, idx) -> "ProjectedSplats":
        return ProjectedSplats(
            mean2d=self.mean2d[idx], cov2d=self.cov2d[idx], conic=self.conic[idx],
            z=self.z[idx], ray_depth=self.ray_depth[idx], color=self.color[idx],
            opacity=self.opacity[idx], index=self.index[idx],
        )


@dataclass
class RenderDiagnostics:
    culled: int = 0
    singular: int = 0
    skipped: int = 0
    tiles: int = 0


@dataclass(eq=False)
class RenderOutput:
    rgb: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor
    contributor: Optional[torch.Tensor] = None
    diagnostics: RenderDiagnostics = field(default_factory=RenderDiagnostics)


GaussiansLike = Union[GaussianSet, Sequence[Gaussian3D]]


def _as_set(gaussians: GaussiansLike) -> GaussianSet:
    if isinstance(gaussians, GaussianSet):
        return gaussians
    return GaussianSet.from_list(list(gaussians))


def project_splats(
    gaussians: GaussianSet,
    intr: Intrinsics,
    pose: PoseSE3,
    diagnostics: Optional[RenderDiagnostics] = None,
) -> ProjectedSplats:
    """EWA projection of a whole set; culled and singular splats are dropped.

    cov2d = J W Σ Wᵀ Jᵀ + dilation·I with J the perspective Jacobian at the mean.
    """
    diagnostics = diagnostics if diagnostics is not None else RenderDiagnostics()
    dtype = gaussians.dtype
    R = pose.R.to(dtype)
    p_cam = (gaussians.mu - pose.translation.to(dtype)) @ R
    x, y, z = p_cam.unbind(-1)
    in_front = z.detach() > config.NEAR_PLANE
    safe_z = torch.where(in_front, z, torch.ones_like(z))

    zeros = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([intr.fx / safe_z, zeros, -intr.fx * x / safe_z ** 2], dim=-1),
        torch.stack([zeros, intr.fy / safe_z, -intr.fy * y / safe_z ** 2], dim=-1),
    ], dim=-2)
    cov_cam = R.T @ gaussians.covariances() @ R
    cov2d = J @ cov_cam @ J.transpose(-1, -2)
    cov2d = cov2d + config.COV_DILATION * torch.eye(2, dtype=dtype)
    mean2d = torch.stack([intr.fx * x / safe_z + intr.cx, intr.fy * y / safe_z + intr.cy], dim=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    finite = torch.isfinite(det.detach()) & torch.isfinite(mean2d.detach()).all(-1)
    singular = in_front & (~finite | (det.detach() <= 1e-12))

    k = config.FOOTPRINT_SIGMA
    with torch.no_grad():
        ext_x = k * torch.sqrt(torch.clamp(a, min=0))
        ext_y = k * torch.sqrt(torch.clamp(c, min=0))
        on_image = (
            (mean2d[:, 0] + ext_x >= 0) & (mean2d[:, 0] - ext_x <= intr.width)
            & (mean2d[:, 1] + ext_y >= 0) & (mean2d[:, 1] - ext_y <= intr.height)
        )
    culled = ~in_front | (~singular & ~on_image)
    keep = ~culled & ~singular
    diagnostics.culled += int(culled.sum())
    diagnostics.singular += int(singular.sum())

    safe_det = torch.where(keep, det, torch.ones_like(det))
    conic = torch.stack([c / safe_det, -b / safe_det, a / safe_det], dim=-1)
    index = torch.nonzero(keep).squeeze(-1)
    return ProjectedSplats(
        mean2d=mean2d[index], cov2d=cov2d[index], conic=conic[index],
        z=z[index], ray_depth=torch.linalg.vector_norm(p_cam[index], dim=-1),
        color=gaussians.color[index], opacity=gaussians.opacity[index], index=index,
    )


def project_gaussian(g: Gaussian3D, intr: Intrinsics, pose: PoseSE3) -> Optional[SplatProjection]:
    """Project one Gaussian; ``None`` when culled."""
    splats = project_splats(GaussianSet.from_list([g]), intr, pose)
    if len(splats) == 0:
        return None
    return SplatProjection(
        mean2d=splats.mean2d[0],
        cov2d=splats.cov2d[0],
        z=float(splats.z[0]),
        ray_depth=float(splats.ray_depth[0]),
        color=splats.color[0],
        opacity=float(splats.opacity[0]),
    )


def splat_alpha(pixels: torch.Tensor, splats: ProjectedSplats, skip_alpha: float) -> torch.Tensor:
    """P×K alphas α' = min(α_max, opacity·exp(−½ dᵀ Σ⁻¹ d)) at pixel centres."""
    d = pixels.unsqueeze(1) - splats.mean2d.unsqueeze(0)
    dx, dy = d[..., 0], d[..., 1]
    a, b, c = splats.conic.unbind(-1)
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    alpha = torch.clamp(splats.opacity * torch.exp(power), max=config.ALPHA_MAX)
    if skip_alpha > 0:
        alpha = torch.where(alpha < skip_alpha, torch.zeros_like(alpha), alpha)
    return alpha


def composite(
    alpha: torch.Tensor,
    splats: ProjectedSplats,
    background: torch.Tensor,
    min_transmittance: float,
):
    """Front-to-back compositing of P×K alphas (splats already depth-sorted).

    Returns per-pixel rgb, depth, accumulated alpha and the contribution weights.
    """
    n_pixels, n_splats = alpha.shape
    if n_splats == 0:
        zeros = alpha.new_zeros(n_pixels)
        return background.expand(n_pixels, 3), zeros, zeros, alpha
    transmit = torch.cumprod(1.0 - alpha, dim=-1)
    before = torch.cat([alpha.new_ones(n_pixels, 1), transmit[:, :-1]], dim=-1)
    weights = alpha * before
    if min_transmittance > 0:
        weights = torch.where(before.detach() >= min_transmittance, weights, torch.zeros_like(weights))
    acc = weights.sum(-1)
    rgb = weights @ splats.color + (1.0 - acc).unsqueeze(-1) * background
    depth = (weights @ splats.ray_depth) / torch.clamp(acc, min=config.DEPTH_ALPHA_FLOOR)
    return rgb, depth, acc, weights


def _pixel_centres(x0: int, x1: int, y0: int, y1: int, dtype) -> torch.Tensor:
    v, u = torch.meshgrid(
        torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype), indexing="ij"
    )
    return torch.stack([u + 0.5, v + 0.5], dim=-1).reshape(-1, 2)


def _contributors(weights: torch.Tensor, splats: ProjectedSplats) -> torch.Tensor:
    if weights.shape[1] == 0:
        return torch.full((weights.shape[0],), -1, dtype=torch.long)
    best, arg = weights.detach().max(dim=-1)
    return torch.where(best > 0, splats.index[arg], torch.full_like(arg, -1))


def _prepare(gaussians: GaussiansLike, intr, pose, cutoff, differentiable):
    """Drop sub-cutoff splats, project, and depth-sort with (z, index) ordering."""
    gs = _as_set(gaussians)
    if not differentiable:
        gs = gs.to(DTYPE)
    diagnostics = RenderDiagnostics()
    live = torch.nonzero(gs.opacity.detach() >= cutoff).squeeze(-1)
    diagnostics.skipped = len(gs) - int(live.shape[0])
    splats = project_splats(gs.select(live), intr, pose, diagnostics)
    splats.index = live[splats.index]
    order = torch.sort(splats.z.detach(), stable=True).indices
    return splats[order], diagnostics, gs.dtype


def _finish(rgb, depth, alpha, contributor, diagnostics, intr, out_dtype):
    shape = (intr.height, intr.width)
    return RenderOutput(
        rgb=rgb.reshape(shape + (3,)).to(out_dtype),
        depth=depth.reshape(shape).to(out_dtype),
        alpha=alpha.reshape(shape).to(out_dtype),
        contributor=None if contributor is None else contributor.reshape(shape),
        diagnostics=diagnostics,
    )


def tile_ranges(splats: ProjectedSplats, cutoff: float, tile_size: int, n_tx: int, n_ty: int):
    """Inclusive tile index ranges covered by each splat's alpha-cutoff ellipse."""
    with torch.no_grad():
        ratio = torch.clamp(splats.opacity / cutoff, min=1.0)
        k = torch.sqrt(2.0 * torch.log(ratio))
        ext_x = k * torch.sqrt(splats.cov2d[:, 0, 0])
        ext_y = k * torch.sqrt(splats.cov2d[:, 1, 1])
        mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
        x_lo = torch.clamp(torch.floor((mx - ext_x) / tile_size), 0, n_tx - 1).long()
        x_hi = torch.clamp(torch.floor((mx + ext_x) / tile_size), 0, n_tx - 1).long()
        y_lo = torch.clamp(torch.floor((my - ext_y) / tile_size), 0, n_ty - 1).long()
        y_hi = torch.clamp(torch.floor((my + ext_y) / tile_size), 0, n_ty - 1).long()
        # Ellipses entirely off one side of the image cover no tile
        off = (mx + ext_x < 0) | (mx - ext_x > n_tx * tile_size) | (my + ext_y < 0) | (my - ext_y > n_ty * tile_size)
        x_hi = torch.where(off, x_lo - 1, x_hi)
    return x_lo, x_hi, y_lo, y_hi


def render(
    gaussians: GaussiansLike,
    intr: Intrinsics,
    pose: PoseSE3,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    thresholds: bool = True,
    tile_size: int = config.TILE_SIZE,
    workers: Optional[int] = None,
    differentiable: bool = False,
    return_contributor: bool = False,
    out_dtype: Optional[torch.dtype] = None,
) -> RenderOutput:
    """Tile-parallel splatting render.

    Args:
        gaussians: Gaussian set in the world frame.
        intr: Camera intrinsics.
        pose: Camera-to-world pose.
        background: RGB composited behind the splats.
        thresholds: Apply the 1/255 alpha skip and the transmittance early-out.
        tile_size: Tile edge in pixels.
        workers: Tile worker threads (defaults to the configured thread count).
        differentiable: Keep the autograd graph and float64 outputs.
        return_contributor: Also return the index of each pixel's largest contributor.
        out_dtype: Output dtype; float32 unless differentiable.

    Returns:
        RenderOutput with rgb H×W×3, depth H×W (ray length) and alpha H×W.
    """
    skip = config.ALPHA_MIN if thresholds else 0.0
    min_t = config.MIN_TRANSMITTANCE if thresholds else 0.0
    cutoff = config.ALPHA_MIN if thresholds else config.EXACT_ALPHA_CUTOFF
    workers = workers or config.THREADS
    splats, diagnostics, dtype = _prepare(gaussians, intr, pose, cutoff, differentiable)
    bg = as_tensor(background).to(dtype)

    n_tx = math.ceil(intr.width / tile_size)
    n_ty = math.ceil(intr.height / tile_size)
    x_lo, x_hi, y_lo, y_hi = tile_ranges(splats, cutoff, tile_size, n_tx, n_ty)
    diagnostics.tiles = n_tx * n_ty

    def render_tile(tile: Tuple[int, int]):
        tx, ty = tile
        x0, y0 = tx * tile_size, ty * tile_size
        x1, y1 = min(x0 + tile_size, intr.width), min(y0 + tile_size, intr.height)
        hits = torch.nonzero((x_lo <= tx) & (x_hi >= tx) & (y_lo <= ty) & (y_hi >= ty)).squeeze(-1)
        local = splats[hits]
        pixels = _pixel_centres(x0, x1, y0, y1, dtype)
        alpha = splat_alpha(pixels, local, skip)
        rgb, depth, acc, weights = composite(alpha, local, bg, min_t)
        contributor = _contributors(weights, local) if return_contributor else None
        shape = (y1 - y0, x1 - x0)
        logger.debug(f"Tile ({tx}, {ty}): {len(local)} splats")
        return (
            rgb.reshape(shape + (3,)), depth.reshape(shape), acc.reshape(shape),
            None if contributor is None else contributor.reshape(shape),
        )

    tiles = [(tx, ty) for ty in range(n_ty) for tx in range(n_tx)]
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(render_tile, tiles))
    else:
        results = [render_tile(t) for t in tiles]

    def assemble(part: int) -> Optional[torch.Tensor]:
        if results[0][part] is None:
            return None
        rows = [
            torch.cat([results[ty * n_tx + tx][part] for tx in range(n_tx)], dim=1)
            for ty in range(n_ty)
        ]
        return torch.cat(rows, dim=0)

    out_dtype = out_dtype or (dtype if differentiable else torch.float32)
    return _finish(assemble(0), assemble(1), assemble(2), assemble(3), diagnostics, intr, out_dtype)


def render_reference(
    gaussians: GaussiansLike,
    intr: Intrinsics,
    pose: PoseSE3,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    thresholds: bool = False,
    return_contributor: bool = False,
    out_dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    """Every pixel composites every surviving splat; no tiling.

    With ``thresholds`` off this is the plain compositing sum; with it on it
    applies the same skip and early-out rules as ``render``.
    """
    skip = config.ALPHA_MIN if thresholds else 0.0
    min_t = config.MIN_TRANSMITTANCE if thresholds else 0.0
    splats, diagnostics, dtype = _prepare(gaussians, intr, pose, 0.0, False)
    bg = as_tensor(background).to(dtype)
    pixels = _pixel_centres(0, intr.width, 0, intr.height, dtype)

    parts: List[tuple] = []
    for start in range(0, pixels.shape[0], REFERENCE_CHUNK):
        chunk = pixels[start:start + REFERENCE_CHUNK]
        alpha = splat_alpha(chunk, splats, skip)
        rgb, depth, acc, weights = composite(alpha, splats, bg, min_t)
        contributor = _contributors(weights, splats) if return_contributor else None
        parts.append((rgb, depth, acc, contributor))

    rgb = torch.cat([p[0] for p in parts])
    depth = torch.cat([p[1] for p in parts])
    acc = torch.cat([p[2] for p in parts])
    contributor = torch.cat([p[3] for p in parts]) if return_contributor else None
    return _finish(rgb, depth, acc, contributor, diagnostics, intr, out_dtype)


@dataclass(eq=False)
class ThresholdBound:
    """Per-pixel limits on how far a thresholded render drifts from the exact composite."""

    colour: torch.Tensor  # H×W, applies to every rgb channel and to alpha
    depth: torch.Tensor   # H×W, inf where the exact alpha is at or below ``covered``


def threshold_bound(
    gaussians: GaussiansLike,
    intr: Intrinsics,
    pose: PoseSE3,
    covered: float = 1e-3,
) -> ThresholdBound:
    """Drift allowed by the 1/255 skip and the transmittance early-out.

    The composite is affine in each splat's alpha with slope at most 1 per
    channel (colours and background in [0, 1]), so zeroing the skipped alphas
    moves rgb and alpha by at most their sum m. The early-out adds at most the
    transmittance it stops at. With e = m + MIN_TRANSMITTANCE the depth moves
    by at most 2·z_max·e / A for exact alpha A, z_max the farthest ray depth.
    """
    splats, _, dtype = _prepare(gaussians, intr, pose, 0.0, False)
    z_max = float(splats.ray_depth.max()) if len(splats) else 0.0
    pixels = _pixel_centres(0, intr.width, 0, intr.height, dtype)

    colour_parts, depth_parts = [], []
    for start in range(0, pixels.shape[0], REFERENCE_CHUNK):
        alpha = splat_alpha(pixels[start:start + REFERENCE_CHUNK], splats, 0.0)
        skipped = torch.where(alpha < config.ALPHA_MIN, alpha, torch.zeros_like(alpha)).sum(-1)
        exact = 1.0 - torch.prod(1.0 - alpha, dim=-1)
        colour = skipped + config.MIN_TRANSMITTANCE
        depth = torch.where(
            exact > covered,
            2.0 * z_max * colour / torch.clamp(exact, min=covered),
            torch.full_like(colour, math.inf),
        )
        colour_parts.append(colour)
        depth_parts.append(depth)

    shape = (intr.height, intr.width)
    return ThresholdBound(torch.cat(colour_parts).reshape(shape), torch.cat(depth_parts).reshape(shape))
