"""
Camera models, rigid transforms and Plücker ray maps.

Conventions: quaternions are (w, x, y, z) with the Hamilton product, poses are
camera-to-world (they map camera-frame points to world-frame points), camera
frames look down +z with +x right and +y down. Everything here runs in float64.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Optional, Sequence, Union

import torch

import config
from errors import InvalidCameraError, InvalidDepthError, InvalidPoseError

if TYPE_CHECKING:
    from gaussians import Gaussian3D

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

DTYPE = torch.float64

VectorLike = Union[torch.Tensor, Sequence[float]]


def as_tensor(value: VectorLike) -> torch.Tensor:
    """Convert a vector-like value to a float64 tensor."""
    return torch.as_tensor(value, dtype=DTYPE)


# --- Quaternions ---

def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a ⊗ b for (..., 4) tensors."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_from_yaw(yaw: float) -> torch.Tensor:
    """Rotation about the +z (up) axis."""
    return as_tensor([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


# Camera-to-ego rotation of a forward-looking camera: camera z → ego x,
# camera x → ego −y, camera y → ego −z
FORWARD_CAMERA_QUAT = (0.5, -0.5, 0.5, -0.5)


def rig_rotation(yaw: float) -> torch.Tensor:
    """Camera-to-ego rotation of a level camera yawed ``yaw`` radians left of forward."""
    return quat_multiply(quat_from_yaw(yaw), as_tensor(FORWARD_CAMERA_QUAT))


def covariance_from_quaternion(rot: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Σ = R diag(s²) Rᵀ for batched (..., 4) rotations and (..., 3) scales."""
    R = quat_to_matrix(quat_normalize(rot))
    M = R * scale.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


# --- Camera types ---

@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCameraError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCameraError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the same camera at 1/factor resolution."""
        return Intrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def matrix(self) -> torch.Tensor:
        return as_tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid camera-to-world transform."""

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        q = as_tensor(self.rotation).reshape(4)
        t = as_tensor(self.translation).reshape(3)
        norm = float(torch.linalg.vector_norm(q))
        if not math.isfinite(norm) or abs(norm - 1.0) > config.QUATERNION_TOLERANCE:
            raise InvalidPoseError(f"rotation must be a unit quaternion, got norm {norm}")
        if not bool(torch.isfinite(t).all()):
            raise InvalidPoseError("translation must be finite")
        object.__setattr__(self, "rotation", q / norm)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(as_tensor([1.0, 0.0, 0.0, 0.0]), as_tensor([0.0, 0.0, 0.0]))

    @classmethod
    def from_yaw(cls, yaw: float, translation: VectorLike) -> "PoseSE3":
        return cls(quat_from_yaw(yaw), as_tensor(translation))

    @property
    def R(self) -> torch.Tensor:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> torch.Tensor:
        T = torch.eye(4, dtype=DTYPE)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply ``other`` first, then ``self``."""
        rotation = quat_normalize(quat_multiply(self.rotation, other.rotation))
        translation = self.R @ other.translation + self.translation
        return PoseSE3(rotation, translation)

    def inverse(self) -> "PoseSE3":
        rotation = quat_conjugate(self.rotation)
        translation = -(self.R.T @ self.translation)
        return PoseSE3(rotation, translation)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Map (..., 3) points through the transform."""
        R = self.R.to(points.dtype)
        return points @ R.T + self.translation.to(points.dtype)

    def apply_inverse(self, points: torch.Tensor) -> torch.Tensor:
        R = self.R.to(points.dtype)
        return (points - self.translation.to(points.dtype)) @ R


@dataclass(frozen=True, eq=False)
class Camera:
    """A rig camera: intrinsics plus its camera-to-ego pose."""

    id: str
    intrinsics: Intrinsics
    pose: PoseSE3

    def scaled(self, factor: int) -> "Camera":
        return dataclasses.replace(self, intrinsics=self.intrinsics.scaled(factor))


@dataclass(frozen=True, eq=False)
class RayMap:
    """Per-pixel ray origins and unit directions, both H×W×3."""

    origins: torch.Tensor
    directions: torch.Tensor

    @property
    def shape(self):
        return tuple(self.origins.shape[:2])

    def as_channels(self) -> torch.Tensor:
        """6-channel Plücker encoding (direction, moment o × d), H×W×6."""
        moment = torch.linalg.cross(self.origins, self.directions, dim=-1)
        return torch.cat([self.directions, moment], dim=-1)


class ProjectedPoint(NamedTuple):
    pixel: torch.Tensor
    z: float


def _camera_directions(intr: Intrinsics, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    x = (u + 0.5 - intr.cx) / intr.fx
    y = (v + 0.5 - intr.cy) / intr.fy
    d = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    return d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)


def pixel_ray(intr: Intrinsics, pose: PoseSE3, u: float, v: float):
    """Ray through pixel index (u, v); fractional indices are allowed."""
    d_cam = _camera_directions(intr, as_tensor(u), as_tensor(v))
    direction = pose.R @ d_cam
    direction = direction / torch.linalg.vector_norm(direction)
    return pose.translation.clone(), direction


def plucker_ray_map(intr: Intrinsics, pose: PoseSE3) -> RayMap:
    """Ray origins and directions for every pixel centre of the image."""
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=DTYPE),
        torch.arange(intr.width, dtype=DTYPE),
        indexing="ij",
    )
    d_cam = _camera_directions(intr, u, v)
    directions = d_cam @ pose.R.T
    directions = directions / torch.linalg.vector_norm(directions, dim=-1, keepdim=True)
    origins = pose.translation.expand(intr.height, intr.width, 3).clone()
    return RayMap(origins=origins, directions=directions)


def unproject(ray_origin: torch.Tensor, ray_dir: torch.Tensor, depth) -> torch.Tensor:
    """Point at ray-length ``depth`` along the ray; broadcasts over depth maps."""
    depth = torch.as_tensor(depth, dtype=ray_dir.dtype)
    if not bool((depth > 0).all()):
        raise InvalidDepthError(f"depth must be positive, got min {float(depth.min())}")
    return ray_origin + depth.unsqueeze(-1) * ray_dir


def project_points(points: torch.Tensor, intr: Intrinsics, pose: PoseSE3):
    """Batched pinhole projection; returns (pixels N×2, z N, visible N)."""
    p_cam = pose.apply_inverse(points)
    z = p_cam[..., 2]
    visible = z > 1e-6
    safe_z = torch.where(visible, z, torch.ones_like(z))
    px = intr.fx * p_cam[..., 0] / safe_z + intr.cx
    py = intr.fy * p_cam[..., 1] / safe_z + intr.cy
    return torch.stack([px, py], dim=-1), z, visible


def project_point(p: VectorLike, intr: Intrinsics, pose: PoseSE3) -> Optional[ProjectedPoint]:
    """Project a world point; ``None`` when it is not in front of the camera."""
    pixels, z, visible = project_points(as_tensor(p).reshape(1, 3), intr, pose)
    if not bool(visible[0]):
        return None
    return ProjectedPoint(pixel=pixels[0], z=float(z[0]))


def transform_gaussian(g: "Gaussian3D", pose: PoseSE3) -> "Gaussian3D":
    """Move a Gaussian through a rigid transform; Σ' = R Σ Rᵀ."""
    mu = pose.apply(as_tensor(g.mu))
    rot = quat_normalize(quat_multiply(pose.rotation, as_tensor(g.rot)))
    return dataclasses.replace(g, mu=mu, rot=rot)
