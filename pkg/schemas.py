# schemas.py
"""
Pydantic models for every textual document: camera rig, trajectory,
conditions, scene manifest and the pipeline configuration.
"""
import base64
import math
from typing import List, Optional

import torch
from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator

import config
from conditions import BEVSketch, Box3D, ConditionSet, EgoTrajectory
from geometry import Camera, Intrinsics, PoseSE3, as_tensor

# --- Cameras and poses ---

class PoseManifest(BaseModel):
    quaternion: List[float] = Field(min_length=4, max_length=4)  # w, x, y, z
    translation: List[float] = Field(min_length=3, max_length=3)

    @classmethod
    def from_pose(cls, pose: PoseSE3) -> "PoseManifest":
        return cls(quaternion=pose.rotation.tolist(), translation=pose.translation.tolist())

    def to_pose(self) -> PoseSE3:
        return PoseSE3(as_tensor(self.quaternion), as_tensor(self.translation))


class CameraManifest(BaseModel):
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    quaternion: List[float] = Field(min_length=4, max_length=4)
    translation: List[float] = Field(min_length=3, max_length=3)

    @classmethod
    def from_camera(cls, cam: Camera) -> "CameraManifest":
        intr = cam.intrinsics
        return cls(
            id=cam.id, fx=intr.fx, fy=intr.fy, cx=intr.cx, cy=intr.cy,
            width=intr.width, height=intr.height,
            quaternion=cam.pose.rotation.tolist(), translation=cam.pose.translation.tolist(),
        )

    def to_camera(self) -> Camera:
        intr = Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        return Camera(self.id, intr, PoseSE3(as_tensor(self.quaternion), as_tensor(self.translation)))


class RigManifest(BaseModel):
    """The camera rig document (``rig.json``) shared by scene directories."""

    convention: str = config.COORDINATE_CONVENTION
    cameras: List[CameraManifest] = Field(min_length=1)

    @classmethod
    def from_cameras(cls, cameras: List[Camera]) -> "RigManifest":
        return cls(cameras=[CameraManifest.from_camera(c) for c in cameras])

    def to_cameras(self) -> List[Camera]:
        return [c.to_camera() for c in self.cameras]


class TrajectoryManifest(BaseModel):
    timestamps: List[float]
    poses: List[PoseManifest]

    @classmethod
    def from_trajectory(cls, traj: EgoTrajectory) -> "TrajectoryManifest":
        return cls(
            timestamps=list(traj.timestamps),
            poses=[PoseManifest.from_pose(p) for p in traj.poses],
        )

    def to_trajectory(self) -> EgoTrajectory:
        return EgoTrajectory([p.to_pose() for p in self.poses], list(self.timestamps))


# --- Conditions ---

class BoxManifest(BaseModel):
    center: List[float] = Field(min_length=3, max_length=3)
    size: List[float] = Field(min_length=3, max_length=3)
    yaw: float
    class_tag: str

    @classmethod
    def from_box(cls, box: Box3D) -> "BoxManifest":
        return cls(center=box.center.tolist(), size=box.size.tolist(), yaw=box.yaw, class_tag=box.class_tag)

    def to_box(self) -> Box3D:
        return Box3D(as_tensor(self.center), as_tensor(self.size), self.yaw, self.class_tag)


class SketchManifest(BaseModel):
    resolution: int
    extent: float
    channels: List[str]
    grid: str  # base64 of the C×S×S uint8 raster

    @classmethod
    def from_sketch(cls, sketch: BEVSketch) -> "SketchManifest":
        raw = sketch.grid.contiguous().numpy().tobytes()
        return cls(
            resolution=sketch.resolution, extent=sketch.extent,
            channels=list(sketch.channels), grid=base64.b64encode(raw).decode("ascii"),
        )

    def to_sketch(self) -> BEVSketch:
        raw = bytearray(base64.b64decode(self.grid))
        grid = torch.frombuffer(raw, dtype=torch.uint8).reshape(len(self.channels), self.resolution, self.resolution)
        return BEVSketch(grid.clone(), self.extent, tuple(self.channels))


class ConditionManifest(BaseModel):
    tag: str
    trajectory: TrajectoryManifest
    boxes: List[List[BoxManifest]]
    sketches: List[SketchManifest]

    @classmethod
    def from_conditions(cls, c: ConditionSet) -> "ConditionManifest":
        return cls(
            tag=c.tag,
            trajectory=TrajectoryManifest.from_trajectory(c.trajectory),
            boxes=[[BoxManifest.from_box(b) for b in step] for step in c.boxes],
            sketches=[SketchManifest.from_sketch(s) for s in c.sketches],
        )

    def to_conditions(self) -> ConditionSet:
        return ConditionSet(
            sketches=[s.to_sketch() for s in self.sketches],
            boxes=[[b.to_box() for b in step] for step in self.boxes],
            trajectory=self.trajectory.to_trajectory(),
            tag=self.tag,
        )


# --- Scenes ---

class SceneManifest(BaseModel):
    version: int = config.FORMAT_VERSION
    convention: str = config.COORDINATE_CONVENTION
    seed: int
    views: int
    frames: int
    height: int
    width: int
    n_static: int
    n_dynamic: int
    d_min: float
    d_max: float
    background: List[float] = Field(min_length=3, max_length=3)
    trajectory: TrajectoryManifest
    gaussian_files: List[str]
    rig_file: str = "rig.json"
    conditions_file: str = "conditions.json"


# --- Pipeline configuration ---

class PipelineConfig(BaseModel):
    scene_dir: Optional[str] = None
    flow_checkpoint: Optional[str] = None
    decoder_checkpoint: Optional[str] = None
    refiner_checkpoint: Optional[str] = None
    output_dir: str = config.OUTPUT_DIR
    euler_steps: int = Field(default=config.EULER_STEPS, ge=1)
    dy_values: List[float] = Field(default_factory=lambda: list(config.DELTA_Y_VALUES))
    mask_threshold: float = config.MASK_THRESHOLD
    guidance_weight: float = config.GUIDANCE_WEIGHT
    seed: int = 0
    base_t: int = Field(default=0, ge=0)
    clip_len: int = Field(default=config.DECODER_CLIP_LEN, ge=1)
    threads: int = Field(default=config.THREADS, ge=1)
    dump_intermediate: bool = False

    @field_validator("dy_values", mode="before")
    @classmethod
    def split_dy(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("dy_values")
    @classmethod
    def finite_dy(cls, value: List[float]) -> List[float]:
        for dy in value:
            if not math.isfinite(dy):
                raise ValueError(f"lateral offsets must be finite, got {dy}")
        return value

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "PipelineConfig":
        """Defaults, then the key-value file, then explicit overrides (None values ignored)."""
        values = {}
        if path:
            values.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def as_lines(self) -> List[str]:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, list):
                value = ",".join(f"{v:g}" for v in value)
            lines.append(f"{key}={'' if value is None else value}")
        return lines
