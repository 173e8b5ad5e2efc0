"""
Gaussian containers, decoder-output activations and 4D aggregation.

A decoder emits one raw parameter vector per pixel. ``params_to_gaussians``
turns a view's grid into pixel-aligned Gaussians placed along the pixel rays,
``classify_dynamic`` splits them into static and dynamic sets, and
``aggregate_4d`` fuses all timesteps into one world-frame scene per timestep:
every frame's static Gaussians plus the current frame's dynamic ones.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

import config
from errors import CorruptLatentError, IncompleteTrajectoryError, ShapeMismatchError
from geometry import (
    DTYPE,
    PoseSE3,
    RayMap,
    covariance_from_quaternion,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
)

if TYPE_CHECKING:
    from conditions import EgoTrajectory

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# Raw per-pixel channel layout emitted by the decoder head
RAW_LAYOUT = {
    "delta": slice(0, 3),
    "rot": slice(3, 7),
    "scale": slice(7, 10),
    "opacity": slice(10, 11),
    "color": slice(11, 14),
    "depth": slice(14, 15),
    "mask": slice(15, 16),
}
RAW_CHANNELS = 16
# Activated layout per Gaussian: μ(3) r(4) s(3) α(1) c(3), plus one mask logit
GAUSSIAN_CHANNELS = 14

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    """One anisotropic splat."""

    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    opacity: float
    color: torch.Tensor

    def is_valid(self) -> bool:
        return (
            bool((self.scale > 0).all())
            and 0.0 < float(self.opacity) < 1.0
            and abs(float(torch.linalg.vector_norm(self.rot)) - 1.0) <= 1e-6
            and bool(((self.color >= 0) & (self.color <= 1)).all())
        )


@dataclass(eq=False)
class GaussianSet:
    """N Gaussians stored row-wise: mu N×3, rot N×4, scale N×3, opacity N, color N×3."""

    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor

    def __len__(self) -> int:
        return int(self.mu.shape[0])

    @property
    def dtype(self):
        return self.mu.dtype

    @classmethod
    def empty(cls, dtype=DTYPE) -> "GaussianSet":
        return cls(
            mu=torch.zeros(0, 3, dtype=dtype),
            rot=torch.zeros(0, 4, dtype=dtype),
            scale=torch.zeros(0, 3, dtype=dtype),
            opacity=torch.zeros(0, dtype=dtype),
            color=torch.zeros(0, 3, dtype=dtype),
        )

    @classmethod
    def from_list(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianSet":
        if not gaussians:
            return cls.empty()
        return cls(
            mu=torch.stack([torch.as_tensor(g.mu, dtype=DTYPE) for g in gaussians]),
            rot=torch.stack([torch.as_tensor(g.rot, dtype=DTYPE) for g in gaussians]),
            scale=torch.stack([torch.as_tensor(g.scale, dtype=DTYPE) for g in gaussians]),
            opacity=torch.as_tensor([float(g.opacity) for g in gaussians], dtype=DTYPE),
            color=torch.stack([torch.as_tensor(g.color, dtype=DTYPE) for g in gaussians]),
        )

    @classmethod
    def from_rows(cls, rows: torch.Tensor) -> "GaussianSet":
        """Build from N×14 rows ordered (μ₃, r₄, s₃, α₁, c₃)."""
        return cls(
            mu=rows[:, 0:3], rot=rows[:, 3:7], scale=rows[:, 7:10],
            opacity=rows[:, 10], color=rows[:, 11:14],
        )

    def to_rows(self) -> torch.Tensor:
        return torch.cat(
            [self.mu, self.rot, self.scale, self.opacity.unsqueeze(-1), self.color], dim=-1
        )

    def to_list(self) -> List[Gaussian3D]:
        return [
            Gaussian3D(self.mu[i], self.rot[i], self.scale[i], float(self.opacity[i]), self.color[i])
            for i in range(len(self))
        ]

    def __getitem__(self, index) -> "GaussianSet":
        return GaussianSet(
            mu=self.mu[index], rot=self.rot[index], scale=self.scale[index],
            opacity=self.opacity[index], color=self.color[index],
        )

    def select(self, index) -> "GaussianSet":
        """Subset by boolean mask or index tensor."""
        return self[index]

    @staticmethod
    def cat(sets: Sequence["GaussianSet"]) -> "GaussianSet":
        sets = [s for s in sets if len(s) > 0] or list(sets[:1])
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(
            mu=torch.cat([s.mu for s in sets]),
            rot=torch.cat([s.rot for s in sets]),
            scale=torch.cat([s.scale for s in sets]),
            opacity=torch.cat([s.opacity for s in sets]),
            color=torch.cat([s.color for s in sets]),
        )

    def to(self, dtype) -> "GaussianSet":
        return GaussianSet(
            mu=self.mu.to(dtype), rot=self.rot.to(dtype), scale=self.scale.to(dtype),
            opacity=self.opacity.to(dtype), color=self.color.to(dtype),
        )

    def detach(self) -> "GaussianSet":
        return GaussianSet(
            mu=self.mu.detach(), rot=self.rot.detach(), scale=self.scale.detach(),
            opacity=self.opacity.detach(), color=self.color.detach(),
        )

    def covariances(self) -> torch.Tensor:
        return covariance_from_quaternion(self.rot, self.scale)

    def transform(self, pose: PoseSE3) -> "GaussianSet":
        q = pose.rotation.to(self.dtype).expand_as(self.rot)
        return GaussianSet(
            mu=pose.apply(self.mu),
            rot=quat_normalize(quat_multiply(q, self.rot)),
            scale=self.scale,
            opacity=self.opacity,
            color=self.color,
        )


@dataclass(eq=False)
class GaussianFrame:
    """Pixel-aligned Gaussians of one view at one timestep.

    Contents are expressed in the ego (rig) frame of timestep ``t``;
    ``aggregate_4d`` lifts them into the world frame.
    """

    gaussians: GaussianSet
    dynamic_flags: torch.Tensor
    t: int
    view_id: str = ""
    mask_logits: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.dynamic_flags.shape[0] != len(self.gaussians):
            raise ShapeMismatchError(
                f"{self.dynamic_flags.shape[0]} flags for {len(self.gaussians)} Gaussians"
            )


@dataclass(eq=False)
class Scene4D:
    """World-frame Gaussian set per timestep with provenance tags."""

    sets: List[GaussianSet]
    source_t: List[torch.Tensor] = field(default_factory=list)
    dynamic: List[torch.Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, t: int) -> GaussianSet:
        return self.sets[t]


def _check_finite(params: torch.Tensor) -> None:
    for name, channels in RAW_LAYOUT.items():
        if not bool(torch.isfinite(params[..., channels]).all()):
            raise CorruptLatentError("non-finite decoder output", channel=name)


def softplus_inverse(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x > 20.0, x, torch.log(torch.expm1(torch.clamp(x, max=20.0))))


def classify_dynamic(mask_logits: torch.Tensor, threshold: float = config.MASK_THRESHOLD) -> torch.Tensor:
    """Dynamic when sigmoid(logit) > threshold; ties go to static."""
    return torch.sigmoid(mask_logits) > threshold


def activate(
    params: torch.Tensor,
    rays: RayMap,
    cam_pose: PoseSE3,
    d_min: float = config.D_MIN,
    delta_max: float = config.DELTA_MAX,
) -> GaussianSet:
    """Apply the activations to an H×W×16 grid, returning H·W Gaussians in pixel-major order."""
    if params.shape[-1] != RAW_CHANNELS or tuple(params.shape[:2]) != rays.shape:
        raise ShapeMismatchError(
            f"params {tuple(params.shape)} do not match ray map {rays.shape} x {RAW_CHANNELS}"
        )
    _check_finite(params)
    flat = params.reshape(-1, RAW_CHANNELS)
    dtype = flat.dtype
    origins = rays.origins.reshape(-1, 3).to(dtype)
    directions = rays.directions.reshape(-1, 3).to(dtype)
    cam_R = cam_pose.R.to(dtype)
    cam_q = cam_pose.rotation.to(dtype)

    # Offset and rotation are predicted in the camera frame
    delta = flat[:, RAW_LAYOUT["delta"]]
    delta_norm = torch.linalg.vector_norm(delta, dim=-1, keepdim=True)
    delta = delta * (delta_max / torch.clamp(delta_norm, min=delta_max))
    delta = delta @ cam_R.T

    depth = F.softplus(flat[:, RAW_LAYOUT["depth"]]) + d_min
    mu = origins + depth * directions + delta

    rot_raw = flat[:, RAW_LAYOUT["rot"]]
    rot_norm = torch.linalg.vector_norm(rot_raw, dim=-1, keepdim=True)
    degenerate = rot_norm < 1e-12
    identity = rot_raw.new_tensor(IDENTITY_QUAT).expand_as(rot_raw)
    rot_local = torch.where(degenerate, identity, rot_raw / torch.clamp(rot_norm, min=1e-12))
    rot = quat_normalize(quat_multiply(cam_q.expand_as(rot_local), rot_local))

    scale_raw = torch.clamp(flat[:, RAW_LAYOUT["scale"]], config.SCALE_RAW_MIN, config.SCALE_RAW_MAX)
    opacity = torch.sigmoid(flat[:, RAW_LAYOUT["opacity"]].squeeze(-1))
    opacity = torch.clamp(opacity, config.OPACITY_EPS, 1.0 - config.OPACITY_EPS)
    color = torch.sigmoid(flat[:, RAW_LAYOUT["color"]])
    return GaussianSet(mu=mu, rot=rot, scale=torch.exp(scale_raw), opacity=opacity, color=color)


def params_to_gaussians(
    params: torch.Tensor,
    rays: RayMap,
    cam_pose: PoseSE3,
    t: int = 0,
    view_id: str = "",
    d_min: float = config.D_MIN,
    delta_max: float = config.DELTA_MAX,
    threshold: float = config.MASK_THRESHOLD,
) -> GaussianFrame:
    """One Gaussian per pixel with μ = R_o + depth·R_d + δ and its dynamic flag."""
    gaussians = activate(params, rays, cam_pose, d_min=d_min, delta_max=delta_max)
    mask_logits = params.reshape(-1, RAW_CHANNELS)[:, RAW_LAYOUT["mask"]].squeeze(-1)
    return GaussianFrame(
        gaussians=gaussians,
        dynamic_flags=classify_dynamic(mask_logits.detach(), threshold),
        t=t,
        view_id=view_id,
        mask_logits=mask_logits,
    )


def gaussians_to_params(
    rgb: torch.Tensor,
    depth: torch.Tensor,
    mask: torch.Tensor,
    cam_pose: PoseSE3,
    scale: float = 0.05,
    opacity: float = 0.99,
    mask_logit: float = 12.0,
    d_min: float = config.D_MIN,
) -> torch.Tensor:
    """Invert the activations: encode a view's targets as an H×W×16 raw grid with δ = 0."""
    height, width = depth.shape
    params = torch.zeros(height, width, RAW_CHANNELS, dtype=DTYPE)
    params[..., RAW_LAYOUT["rot"]] = quat_conjugate(cam_pose.rotation)
    params[..., RAW_LAYOUT["scale"]] = torch.log(torch.tensor(scale, dtype=DTYPE))
    params[..., RAW_LAYOUT["opacity"]] = torch.logit(torch.tensor(opacity, dtype=DTYPE))
    params[..., RAW_LAYOUT["color"]] = torch.logit(torch.clamp(rgb.to(DTYPE), 1e-6, 1 - 1e-6))
    params[..., RAW_LAYOUT["depth"]] = softplus_inverse(depth.to(DTYPE) - d_min).unsqueeze(-1)
    params[..., RAW_LAYOUT["mask"]] = torch.where(
        mask.bool(), torch.tensor(mask_logit, dtype=DTYPE), torch.tensor(-mask_logit, dtype=DTYPE)
    ).unsqueeze(-1)
    return params


def aggregate_4d(
    frames: Sequence[GaussianFrame],
    ego: Union["EgoTrajectory", Sequence[PoseSE3]],
) -> Scene4D:
    """Fuse per-frame Gaussians: G_4D[t] = static(1..T) ∪ dynamic(t), in the world frame.

    Concatenation order is timestep-major, then frame order, then pixel order.
    """
    poses = list(getattr(ego, "poses", ego))
    if not frames:
        return Scene4D(sets=[])
    n_steps = max(f.t for f in frames) + 1
    if n_steps > len(poses):
        raise IncompleteTrajectoryError(
            f"frames cover {n_steps} timesteps but the trajectory has {len(poses)} poses"
        )
    ordered = sorted(enumerate(frames), key=lambda item: (item[1].t, item[0]))

    statics, static_src = [], []
    dynamics = {t: [] for t in range(n_steps)}
    for _, frame in ordered:
        world = frame.gaussians.transform(poses[frame.t])
        flags = frame.dynamic_flags
        statics.append(world[~flags])
        static_src.append(torch.full((int((~flags).sum()),), frame.t, dtype=torch.long))
        dynamics[frame.t].append(world[flags])

    static_set = GaussianSet.cat(statics)
    static_t = torch.cat(static_src)
    sets, source_t, dynamic = [], [], []
    for t in range(n_steps):
        dyn = GaussianSet.cat(dynamics[t]) if dynamics[t] else GaussianSet.empty(static_set.dtype)
        sets.append(GaussianSet.cat([static_set, dyn]))
        source_t.append(torch.cat([static_t, torch.full((len(dyn),), t, dtype=torch.long)]))
        dynamic.append(torch.cat([
            torch.zeros(len(static_set), dtype=torch.bool),
            torch.ones(len(dyn), dtype=torch.bool),
        ]))
    logger.debug(f"Aggregated {len(frames)} frames into {n_steps} timesteps "
                 f"({len(static_set)} static Gaussians)")
    return Scene4D(sets=sets, source_t=source_t, dynamic=dynamic)
