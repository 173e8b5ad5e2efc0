"""
Control signals for generation: instance boxes, BEV sketches, the ego
trajectory and a categorical scene tag, plus their embedding and their
reprojection onto a laterally shifted trajectory.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

import config
from errors import (
    InvalidBoxError,
    InvalidTrajectoryError,
    LengthMismatchError,
    UnknownCategoryError,
)
from geometry import DTYPE, Intrinsics, PoseSE3, as_tensor, project_points

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

CORNER_SIGNS = torch.tensor(list(itertools.product((-1.0, 1.0), repeat=3)), dtype=DTYPE)


def wrap_angle(yaw: float) -> float:
    """Map an angle into (−π, π]."""
    wrapped = math.remainder(yaw, 2.0 * math.pi)
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True, eq=False)
class Box3D:
    """Yawed instance box in the world frame; size is (length, width, height)."""

    center: torch.Tensor
    size: torch.Tensor
    yaw: float
    class_tag: str = "car"

    def __post_init__(self):
        size = as_tensor(self.size).reshape(3)
        if not bool((size > 0).all()):
            raise InvalidBoxError(f"box size must be positive, got {size.tolist()}")
        object.__setattr__(self, "center", as_tensor(self.center).reshape(3))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def corners(self) -> torch.Tensor:
        """The 8 world-frame corners, 8×3."""
        local = CORNER_SIGNS * (self.size / 2.0)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = as_tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ R.T + self.center

    def contains(self, points: torch.Tensor) -> torch.Tensor:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = as_tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        local = (points.to(DTYPE) - self.center) @ R
        return (local.abs() <= self.size / 2.0 + 1e-9).all(dim=-1)


@dataclass(frozen=True, eq=False)
class BEVSketch:
    """Ego-centred top-down raster, C×S×S uint8; row i runs along ego x, column j along ego y."""

    grid: torch.Tensor
    extent: float = config.BEV_EXTENT
    channels: tuple = config.BEV_CHANNELS

    def __post_init__(self):
        grid = torch.as_tensor(self.grid, dtype=torch.uint8)
        if grid.dim() != 3 or grid.shape[1] != grid.shape[2]:
            raise LengthMismatchError(f"sketch grid must be C×S×S, got {tuple(grid.shape)}")
        if bool((grid > 1).any()):
            raise ValueError("sketch values must be 0 or 1")
        object.__setattr__(self, "grid", grid)

    @property
    def resolution(self) -> int:
        return int(self.grid.shape[-1])

    @property
    def cell_size(self) -> float:
        return self.extent / self.resolution

    def cell_centres(self) -> torch.Tensor:
        """Ego-frame (x, y, 0) of every cell centre, S×S×3."""
        coords = (torch.arange(self.resolution, dtype=DTYPE) + 0.5) * self.cell_size - self.extent / 2.0
        x, y = torch.meshgrid(coords, coords, indexing="ij")
        return torch.stack([x, y, torch.zeros_like(x)], dim=-1)

    @classmethod
    def empty(cls, resolution: int = config.BEV_RESOLUTION, extent: float = config.BEV_EXTENT) -> "BEVSketch":
        return cls(torch.zeros(len(config.BEV_CHANNELS), resolution, resolution, dtype=torch.uint8), extent)


@dataclass(frozen=True, eq=False)
class EgoTrajectory:
    """Ego-to-world pose per timestep with strictly increasing timestamps."""

    poses: List[PoseSE3]
    timestamps: List[float]

    def __post_init__(self):
        if len(self.poses) != len(self.timestamps):
            raise LengthMismatchError(
                f"{len(self.poses)} poses but {len(self.timestamps)} timestamps"
            )
        for earlier, later in zip(self.timestamps, self.timestamps[1:]):
            if not later > earlier:
                raise InvalidTrajectoryError(f"timestamps must increase strictly ({earlier} -> {later})")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, t: int) -> PoseSE3:
        return self.poses[t]

    def window(self, start: int, length: int) -> "EgoTrajectory":
        return EgoTrajectory(self.poses[start:start + length], self.timestamps[start:start + length])


@dataclass(eq=False)
class ConditionSet:
    """Everything the generator is conditioned on, aligned per timestep."""

    sketches: List[BEVSketch]
    boxes: List[List[Box3D]]
    trajectory: EgoTrajectory
    tag: str = config.SCENE_TAGS[0]

    def __post_init__(self):
        n = len(self.trajectory)
        if len(self.sketches) != n or len(self.boxes) != n:
            raise LengthMismatchError(
                f"conditions cover {len(self.sketches)} sketches and {len(self.boxes)} box lists "
                f"for a {n}-step trajectory"
            )

    @property
    def sketch(self) -> BEVSketch:
        return self.sketches[0]

    def window(self, start: int, length: int) -> "ConditionSet":
        return ConditionSet(
            sketches=self.sketches[start:start + length],
            boxes=self.boxes[start:start + length],
            trajectory=self.trajectory.window(start, length),
            tag=self.tag,
        )


class BoxProjection(NamedTuple):
    corners: torch.Tensor   # 8×2 image coordinates
    visible: torch.Tensor   # 8 bool
    any_visible: bool


def perturb_trajectory(traj: EgoTrajectory, dy: float) -> EgoTrajectory:
    """Shift every pose by ``dy`` meters along its own lateral axis; rotations unchanged."""
    if not math.isfinite(dy):
        raise ValueError(f"lateral offset must be finite, got {dy}")
    offset = as_tensor([0.0, dy, 0.0])
    poses = [PoseSE3(p.rotation, p.translation + p.R @ offset) for p in traj.poses]
    return EgoTrajectory(poses, list(traj.timestamps))


def reproject_boxes(boxes: Sequence[Box3D], intr: Intrinsics, cam_pose: PoseSE3) -> List[BoxProjection]:
    """Project each box's corners into a camera; a box is hidden when all corners are behind it."""
    projections = []
    for box in boxes:
        pixels, _, visible = project_points(box.corners(), intr, cam_pose)
        projections.append(BoxProjection(pixels, visible, bool(visible.any())))
    return projections


def reproject_sketch(
    sketch: Union[BEVSketch, Sequence[BEVSketch]],
    traj: EgoTrajectory,
    new_traj: EgoTrajectory,
) -> List[BEVSketch]:
    """Resample ego-centred sketches into the ego frames of ``new_traj``.

    Each new cell samples the old raster (nearest cell) at the point the
    old ego frame sees; cells landing outside the window are zero.
    """
    sketches = [sketch] * len(traj) if isinstance(sketch, BEVSketch) else list(sketch)
    if len(sketches) != len(traj) or len(new_traj) != len(traj):
        raise LengthMismatchError("sketches and trajectories must have equal length")
    result = []
    for old, pose, new_pose in zip(sketches, traj.poses, new_traj.poses):
        change = pose.inverse().compose(new_pose)
        points = change.apply(old.cell_centres())
        idx = torch.floor((points[..., :2] + old.extent / 2.0) / old.cell_size).long()
        inside = ((idx >= 0) & (idx < old.resolution)).all(dim=-1)
        idx = torch.where(inside.unsqueeze(-1), idx, torch.zeros_like(idx))
        sampled = old.grid[:, idx[..., 0], idx[..., 1]]
        result.append(BEVSketch(sampled * inside.to(torch.uint8), old.extent, old.channels))
    return result


def pose_delta_features(traj: EgoTrajectory) -> torch.Tensor:
    """Flattened relative poses P_{t-1}⁻¹∘P_t (quaternion, translation), 7 per step; the first is identity."""
    features = []
    previous = traj.poses[0]
    for pose in traj.poses:
        delta = previous.inverse().compose(pose)
        features.append(torch.cat([delta.rotation, delta.translation]))
        previous = pose
    return torch.cat(features)


class ConditionEncoder(nn.Module):
    """Fuses boxes, trajectory, tag and sketch into one condition vector.

    Boxes go through a shared MLP over their ego-frame corners and one-hot
    class and are mean-pooled per timestep; the trajectory goes through an
    MLP over pose deltas; tags index an embedding table; sketches are
    average-pooled and projected. The parts are concatenated and projected
    to ``cond_width``.
    """

    def __init__(
        self,
        n_steps: int,
        cond_width: int = config.COND_WIDTH,
        hidden: int = config.ENCODER_HIDDEN,
        tags: Sequence[str] = config.SCENE_TAGS,
        classes: Sequence[str] = config.BOX_CLASSES,
        sketch_channels: int = len(config.BEV_CHANNELS),
        seed: int = 0,
    ):
        super().__init__()
        self.n_steps = n_steps
        self.cond_width = cond_width
        self.hidden = hidden
        self.tags = tuple(tags)
        self.classes = tuple(classes)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.box_mlp = nn.Sequential(
                nn.Linear(24 + len(self.classes), hidden), nn.SiLU(), nn.Linear(hidden, hidden)
            )
            self.traj_mlp = nn.Sequential(nn.Linear(7 * n_steps, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            self.tag_table = nn.Embedding(len(self.tags), hidden)
            pooled = sketch_channels * config.SKETCH_POOL * config.SKETCH_POOL * n_steps
            self.sketch_proj = nn.Linear(pooled, hidden)
            self.fuse = nn.Linear(hidden * (n_steps + 3), cond_width)
        self.double()

    def box_features(self, boxes: Sequence[Box3D], ego_pose: PoseSE3) -> torch.Tensor:
        if not boxes:
            return torch.zeros(self.hidden, dtype=DTYPE)
        rows = []
        for box in boxes:
            if box.class_tag not in self.classes:
                raise UnknownCategoryError(f"unknown box class '{box.class_tag}'")
            one_hot = torch.zeros(len(self.classes), dtype=DTYPE)
            one_hot[self.classes.index(box.class_tag)] = 1.0
            corners = ego_pose.apply_inverse(box.corners()).reshape(-1)
            rows.append(torch.cat([corners, one_hot]))
        return self.box_mlp(torch.stack(rows)).mean(dim=0)

    def tag_index(self, tag: str) -> int:
        if tag not in self.tags:
            raise UnknownCategoryError(f"unknown scene tag '{tag}'")
        return self.tags.index(tag)

    def forward(self, c: ConditionSet) -> torch.Tensor:
        if len(c.trajectory) != self.n_steps:
            raise LengthMismatchError(
                f"encoder expects {self.n_steps} timesteps, conditions have {len(c.trajectory)}"
            )
        tag = self.tag_table(torch.tensor(self.tag_index(c.tag)))
        boxes = [self.box_features(b, pose) for b, pose in zip(c.boxes, c.trajectory.poses)]
        traj = self.traj_mlp(pose_delta_features(c.trajectory))
        grids = torch.stack([s.grid for s in c.sketches]).to(DTYPE)
        pooled = F.adaptive_avg_pool2d(grids, config.SKETCH_POOL).reshape(-1)
        sketch = self.sketch_proj(pooled)
        return self.fuse(torch.cat(boxes + [traj, tag, sketch]))


def embed_conditions(c: ConditionSet, encoder: ConditionEncoder) -> torch.Tensor:
    """Condition embedding vector of width ``encoder.cond_width``."""
    return encoder(c)
