"""
Synthetic driving scenes with exact ground truth.

A scene is a flat road with a centre line and edges, roadside blocks, and
ellipsoid vehicles driving at constant velocity in the two lanes beside the
ego lane. The ego vehicle drives forward along world x carrying a rig of
level cameras. Targets (rgb, ray-length depth, alpha, dynamic mask) are
produced by the reference renderer from the float32-quantised Gaussians, so
stored Gaussian files regenerate them bitwise.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange

import config
from conditions import BEVSketch, Box3D, ConditionSet, EgoTrajectory, perturb_trajectory
from decoder_net import MultiModalLatent, encode_frames
from errors import FormatError, UnknownCategoryError
from formats import atomic_write, read_gaussians, write_depth, write_gaussians, write_pgm, write_ppm
from gaussians import GaussianSet
from geometry import DTYPE, Camera, Intrinsics, PoseSE3, as_tensor, quat_from_yaw, rig_rotation
from rasterizer import render_reference
from schemas import ConditionManifest, RigManifest, SceneManifest, TrajectoryManifest

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

RIG_YAWS_DEGREES = (0.0, 50.0, -50.0, 180.0, 100.0, -100.0, 130.0, -130.0)
LANE_OFFSET = 2.0
ROAD_HALF_WIDTH = 4.0
LINE_HALF_WIDTH = 0.25
VEHICLE_SEMI_AXES = (2.0, 0.9, 0.6)
VEHICLE_HEIGHT = 0.8
BOX_MARGIN = 0.1
DEGRADE_PATCH = 8


@dataclass(eq=False)
class TargetFrames:
    rgb: torch.Tensor     # V×T×H×W×3 float32
    depth: torch.Tensor   # V×T×H×W float32, ray length
    alpha: torch.Tensor   # V×T×H×W float32
    mask: torch.Tensor    # V×T×H×W bool


@dataclass(eq=False)
class SyntheticScene:
    """Ground-truth Gaussians, rig, trajectory, rendered targets and conditions."""

    seed: int
    cameras: List[Camera]
    trajectory: EgoTrajectory
    static: GaussianSet
    dynamic: List[GaussianSet]
    targets: TargetFrames
    conditions: ConditionSet
    d_min: float
    d_max: float
    n_dynamic: int = 0
    background: Tuple[float, float, float] = config.SYNTH_BACKGROUND

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    @property
    def height(self) -> int:
        return self.cameras[0].intrinsics.height

    @property
    def width(self) -> int:
        return self.cameras[0].intrinsics.width

    @property
    def rgb(self) -> torch.Tensor:
        return self.targets.rgb

    @property
    def depth(self) -> torch.Tensor:
        return self.targets.depth

    @property
    def alpha(self) -> torch.Tensor:
        return self.targets.alpha

    @property
    def mask(self) -> torch.Tensor:
        return self.targets.mask

    def gaussians_at(self, t: int) -> GaussianSet:
        return GaussianSet.cat([self.static, self.dynamic[t]])

    def dynamic_flags_at(self, t: int) -> torch.Tensor:
        return torch.cat([
            torch.zeros(len(self.static), dtype=torch.bool),
            torch.ones(len(self.dynamic[t]), dtype=torch.bool),
        ])

    def vehicle_gaussians(self, t: int, k: int) -> GaussianSet:
        n = config.SYNTH_GAUSSIANS_PER_VEHICLE
        return self.dynamic[t][k * n:(k + 1) * n]


def make_rig(n_views: int, height: int, width: int) -> List[Camera]:
    """Level cameras 1.5 m above the ego origin at the standard yaws."""
    focal = (width / 2.0) / math.tan(math.radians(config.SYNTH_FOV_DEGREES) / 2.0)
    intr = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    cameras = []
    for v in range(n_views):
        yaw = math.radians(RIG_YAWS_DEGREES[v % len(RIG_YAWS_DEGREES)])
        pose = PoseSE3(rig_rotation(yaw), as_tensor([0.0, 0.0, config.SYNTH_CAMERA_HEIGHT]))
        cameras.append(Camera(f"cam{v}", intr, pose))
    return cameras


def make_trajectory(n_frames: int) -> EgoTrajectory:
    poses = [
        PoseSE3.from_yaw(0.0, [config.SYNTH_EGO_SPEED * t, 0.0, 0.0]) for t in range(n_frames)
    ]
    return EgoTrajectory(poses, [config.SYNTH_FRAME_DT * t for t in range(n_frames)])


def _uniform(generator, n, low, high) -> torch.Tensor:
    return low + (high - low) * torch.rand(n, generator=generator, dtype=DTYPE)


def _random_yaw_quats(generator, n) -> torch.Tensor:
    yaws = _uniform(generator, n, -math.pi, math.pi)
    return torch.stack([quat_from_yaw(float(y)) for y in yaws]) if n else torch.zeros(0, 4, dtype=DTYPE)


def _static_gaussians(generator, n_static: int, n_frames: int) -> GaussianSet:
    n_ground = (2 * n_static) // 3
    n_blocks = n_static - n_ground
    x_lo, x_hi = -20.0, config.SYNTH_EGO_SPEED * n_frames + 40.0

    gx = _uniform(generator, n_ground, x_lo, x_hi)
    gy = _uniform(generator, n_ground, -12.0, 12.0)
    ground_mu = torch.stack([gx, gy, torch.zeros_like(gx)], dim=-1)
    road = torch.tensor([0.30, 0.30, 0.32], dtype=DTYPE)
    grass = torch.tensor([0.25, 0.45, 0.20], dtype=DTYPE)
    paint = torch.tensor([0.92, 0.92, 0.88], dtype=DTYPE)
    on_line = ((gy.abs() <= LINE_HALF_WIDTH) | ((gy.abs() - ROAD_HALF_WIDTH).abs() <= LINE_HALF_WIDTH)).unsqueeze(-1)
    on_road = (gy.abs() < ROAD_HALF_WIDTH).unsqueeze(-1)
    ground_color = torch.where(on_line, paint, torch.where(on_road, road, grass))
    ground_color = torch.clamp(ground_color + 0.03 * (torch.rand(n_ground, 3, generator=generator, dtype=DTYPE) - 0.5), 0, 1)
    ground = GaussianSet(
        mu=ground_mu,
        rot=_random_yaw_quats(generator, n_ground),
        scale=torch.tensor([0.7, 0.7, 0.02], dtype=DTYPE).expand(n_ground, 3).clone(),
        opacity=torch.full((n_ground,), 0.9, dtype=DTYPE),
        color=ground_color,
    )

    side = torch.where(torch.rand(n_blocks, generator=generator) < 0.5, -1.0, 1.0).to(DTYPE)
    bx = _uniform(generator, n_blocks, x_lo, x_hi)
    by = side * _uniform(generator, n_blocks, 6.0, 10.0)
    bz = _uniform(generator, n_blocks, 0.3, 3.0)
    base = torch.where((side > 0).unsqueeze(-1),
                       torch.tensor([0.65, 0.45, 0.35], dtype=DTYPE),
                       torch.tensor([0.50, 0.50, 0.58], dtype=DTYPE))
    blocks = GaussianSet(
        mu=torch.stack([bx, by, bz], dim=-1),
        rot=_random_yaw_quats(generator, n_blocks),
        scale=torch.full((n_blocks, 3), 0.6, dtype=DTYPE),
        opacity=torch.full((n_blocks,), 0.9, dtype=DTYPE),
        color=torch.clamp(base + 0.2 * (torch.rand(n_blocks, 3, generator=generator, dtype=DTYPE) - 0.5), 0, 1),
    )
    return GaussianSet.cat([ground, blocks])


def _vehicles(generator, n_dynamic: int, n_frames: int) -> List[GaussianSet]:
    """Per-timestep world-frame Gaussians of all vehicles, vehicle-major."""
    n = config.SYNTH_GAUSSIANS_PER_VEHICLE
    per_vehicle = []
    for k in range(n_dynamic):
        lane = LANE_OFFSET if k % 2 == 0 else -LANE_OFFSET
        start = as_tensor([10.0 + 7.0 * k + 2.0 * float(torch.rand(1, generator=generator)), lane, VEHICLE_HEIGHT])
        speed = float(_uniform(generator, 1, 1.0, 3.0))
        # Rejection-free ellipsoid sampling: random direction times cube-root radius
        direction = torch.randn(n, 3, generator=generator, dtype=DTYPE)
        direction = direction / torch.linalg.vector_norm(direction, dim=-1, keepdim=True)
        radius = torch.rand(n, 1, generator=generator, dtype=DTYPE) ** (1.0 / 3.0)
        offsets = direction * radius * as_tensor(VEHICLE_SEMI_AXES)
        color = torch.rand(3, generator=generator, dtype=DTYPE) * 0.7 + 0.2
        colors = torch.clamp(color + 0.05 * (torch.rand(n, 3, generator=generator, dtype=DTYPE) - 0.5), 0, 1)
        frames = []
        for t in range(n_frames):
            centre = start + as_tensor([speed * t, 0.0, 0.0])
            frames.append(GaussianSet(
                mu=offsets + centre,
                rot=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE).expand(n, 4).clone(),
                scale=torch.full((n, 3), 0.3, dtype=DTYPE),
                opacity=torch.full((n,), 0.95, dtype=DTYPE),
                color=colors,
            ))
        per_vehicle.append(frames)
    return [
        GaussianSet.cat([v[t] for v in per_vehicle]) if per_vehicle else GaussianSet.empty()
        for t in range(n_frames)
    ]


def quantize(gaussians: GaussianSet) -> GaussianSet:
    """Round to the float32 values a GS4D file stores."""
    return gaussians.to(torch.float32).to(DTYPE)


def render_targets(
    gaussians_at: Callable[[int], GaussianSet],
    dynamic_at: Callable[[int], torch.Tensor],
    cameras: Sequence[Camera],
    trajectory: EgoTrajectory,
    background: Sequence[float],
) -> TargetFrames:
    """Reference renders of every camera at every pose of ``trajectory``."""
    rgb, depth, alpha, mask = [], [], [], []
    for cam in cameras:
        per = ([], [], [], [])
        for t, ego in enumerate(trajectory.poses):
            out = render_reference(
                gaussians_at(t), cam.intrinsics, ego.compose(cam.pose), background,
                return_contributor=True,
            )
            flags = dynamic_at(t)
            hit = out.contributor >= 0
            dynamic = torch.zeros_like(hit)
            if bool(hit.any()):
                dynamic[hit] = flags[out.contributor[hit]]
            for store, value in zip(per, (out.rgb, out.depth, out.alpha, dynamic)):
                store.append(value)
        for store, values in zip((rgb, depth, alpha, mask), per):
            store.append(torch.stack(values))
    return TargetFrames(torch.stack(rgb), torch.stack(depth), torch.stack(alpha), torch.stack(mask))


def depth_range(targets: TargetFrames) -> Tuple[float, float]:
    valid = targets.alpha > 0.5
    if not bool(valid.any()):
        return config.D_MIN, config.D_MIN + 1.0
    values = targets.depth[valid]
    d_min, d_max = float(values.min()), float(values.max())
    if d_max - d_min < 1e-6:
        d_max = d_min + 1.0
    return d_min, d_max


def fit_boxes(dynamic: GaussianSet, n_dynamic: int) -> List[Box3D]:
    """Axis-aligned boxes around each vehicle's centres plus a margin."""
    n = config.SYNTH_GAUSSIANS_PER_VEHICLE
    boxes = []
    for k in range(n_dynamic):
        centres = dynamic.mu[k * n:(k + 1) * n]
        lo, hi = centres.min(dim=0).values, centres.max(dim=0).values
        boxes.append(Box3D((lo + hi) / 2.0, hi - lo + 2.0 * BOX_MARGIN, 0.0, "car"))
    return boxes


def layout_sketch(ego: PoseSE3) -> BEVSketch:
    """Lane centre line and road edges around one ego pose."""
    empty = BEVSketch.empty()
    world = ego.apply(empty.cell_centres())
    y = world[..., 1]
    lane = y.abs() <= LINE_HALF_WIDTH
    boundary = (y.abs() - ROAD_HALF_WIDTH).abs() <= LINE_HALF_WIDTH
    return BEVSketch(torch.stack([lane, boundary]).to(torch.uint8), empty.extent)


def generate_scene(
    seed: int,
    V: int = config.SYNTH_VIEWS,
    T: int = config.SYNTH_FRAMES,
    H: int = config.SYNTH_HEIGHT,
    W: int = config.SYNTH_WIDTH,
    n_static: int = config.SYNTH_STATIC,
    n_dynamic: int = config.SYNTH_DYNAMIC,
) -> SyntheticScene:
    """Deterministic synthetic scene; ``n_dynamic`` counts vehicles."""
    if min(V, T, H, W) <= 0 or n_static < 0 or n_dynamic < 0:
        raise ValueError(f"scene dimensions must be positive (V={V}, T={T}, H={H}, W={W})")
    if n_static + n_dynamic == 0:
        logger.warning(f"Scene {seed} has no Gaussians; targets are pure background")
    generator = torch.Generator().manual_seed(seed)
    cameras = make_rig(V, H, W)
    trajectory = make_trajectory(T)
    static = quantize(_static_gaussians(generator, n_static, T))
    dynamic = [quantize(d) for d in _vehicles(generator, n_dynamic, T)]
    tag = config.SCENE_TAGS[int(torch.randint(len(config.SCENE_TAGS), (1,), generator=generator))]

    scene = SyntheticScene(
        seed=seed, cameras=cameras, trajectory=trajectory, static=static, dynamic=dynamic,
        targets=None, conditions=None, d_min=0.0, d_max=1.0, n_dynamic=n_dynamic,
    )
    scene.targets = render_targets(scene.gaussians_at, scene.dynamic_flags_at, cameras, trajectory, scene.background)
    scene.d_min, scene.d_max = depth_range(scene.targets)
    scene.conditions = ConditionSet(
        sketches=[layout_sketch(p) for p in trajectory.poses],
        boxes=[fit_boxes(dynamic[t], n_dynamic) for t in range(T)],
        trajectory=trajectory,
        tag=tag,
    )
    logger.info(f"Generated scene {seed}: {len(static)} static Gaussians, {n_dynamic} vehicles, "
                f"{V} views x {T} frames at {W}x{H}")
    return scene


def encode_latent(scene: SyntheticScene, downsample: int = config.LATENT_DOWNSAMPLE) -> MultiModalLatent:
    """Multi-modal latent of the scene's targets at 1/downsample resolution."""
    return encode_frames(scene.rgb, scene.depth, scene.alpha, scene.mask, downsample, scene.d_min, scene.d_max)


def clip_windows(
    scene: SyntheticScene,
    clip_len: int,
    downsample: int = config.LATENT_DOWNSAMPLE,
    degradation: Optional[str] = None,
) -> List[Tuple[torch.Tensor, ConditionSet]]:
    """Flattened latents of every ``clip_len`` window with its conditions.

    With ``degradation`` the rgb targets are degraded before encoding, giving
    the refiner's render input for the same windows.
    """
    rgb = scene.rgb if degradation is None else degrade(scene.rgb, degradation)
    latent = encode_frames(rgb, scene.depth, scene.alpha, scene.mask, downsample, scene.d_min, scene.d_max)
    clip_len = min(clip_len, scene.n_frames)
    return [
        (latent.window(start, clip_len).flatten(), scene.conditions.window(start, clip_len))
        for start in range(scene.n_frames - clip_len + 1)
    ]


def degrade(rgb: torch.Tensor, kind: str) -> torch.Tensor:
    """Apply a refiner-training degradation to ...×H×W×3 images."""
    if kind == "none":
        return rgb.clone()
    if kind == "mask_patch":
        out = rgb.clone()
        height, width = rgb.shape[-3], rgb.shape[-2]
        top, left = height // 2 - DEGRADE_PATCH // 2, width // 2 - DEGRADE_PATCH // 2
        out[..., max(top, 0):top + DEGRADE_PATCH, max(left, 0):left + DEGRADE_PATCH, :] = 0.0
        return out
    if kind == "box_blur":
        lead = rgb.shape[:-3]
        planes = rearrange(rgb.reshape((-1,) + tuple(rgb.shape[-3:])), "n h w c -> n c h w")
        blurred = F.avg_pool2d(F.pad(planes, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        return rearrange(blurred, "n c h w -> n h w c").reshape(lead + tuple(rgb.shape[-3:]))
    raise UnknownCategoryError(f"unknown degradation '{kind}'")


def shifted_truth(scene: SyntheticScene, dy: float) -> TargetFrames:
    """Ground truth rendered along the trajectory shifted ``dy`` meters laterally."""
    if dy == 0:
        return scene.targets
    return render_targets(
        scene.gaussians_at, scene.dynamic_flags_at, scene.cameras,
        perturb_trajectory(scene.trajectory, dy), scene.background,
    )


def _frame_name(v: int, t: int) -> str:
    return f"v{v}_t{t:03d}"


def write_scene(scene: SyntheticScene, directory: str) -> None:
    """Manifest, camera rig, conditions, per-timestep GS4D files and per-frame images."""
    os.makedirs(directory, exist_ok=True)
    gaussian_files = []
    for t in range(scene.n_frames):
        name = os.path.join("gaussians", f"t{t:03d}.gs4d")
        write_gaussians(os.path.join(directory, name), scene.gaussians_at(t), scene.dynamic_flags_at(t))
        gaussian_files.append(name)
    for v in range(scene.n_views):
        for t in range(scene.n_frames):
            stem = _frame_name(v, t)
            write_ppm(os.path.join(directory, "rgb", stem + ".ppm"), scene.rgb[v, t])
            write_depth(os.path.join(directory, "depth", stem + ".dpth"), scene.depth[v, t])
            write_pgm(os.path.join(directory, "mask", stem + ".pgm"), scene.mask[v, t])
    manifest = SceneManifest(
        seed=scene.seed, views=scene.n_views, frames=scene.n_frames,
        height=scene.height, width=scene.width,
        n_static=len(scene.static), n_dynamic=scene.n_dynamic,
        d_min=scene.d_min, d_max=scene.d_max, background=list(scene.background),
        trajectory=TrajectoryManifest.from_trajectory(scene.trajectory),
        gaussian_files=gaussian_files,
    )
    rig = RigManifest.from_cameras(scene.cameras)
    atomic_write(os.path.join(directory, manifest.rig_file), rig.model_dump_json(indent=2).encode("utf-8"))
    conditions = ConditionManifest.from_conditions(scene.conditions)
    atomic_write(os.path.join(directory, manifest.conditions_file), conditions.model_dump_json(indent=2).encode("utf-8"))
    atomic_write(os.path.join(directory, "manifest.json"), manifest.model_dump_json(indent=2).encode("utf-8"))
    logger.info(f"Wrote scene {scene.seed} to {directory}")


def read_manifest(directory: str) -> SceneManifest:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"no scene manifest at {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return SceneManifest.model_validate(json.load(handle))


def read_rig(path: str) -> RigManifest:
    if not os.path.exists(path):
        raise FormatError(f"no camera rig at {path}")
    with open(path, "r", encoding="utf-8") as handle:
        rig = RigManifest.model_validate(json.load(handle))
    if rig.convention != config.COORDINATE_CONVENTION:
        raise FormatError(f"{path}: convention {rig.convention} is not {config.COORDINATE_CONVENTION}")
    return rig


def read_scene(directory: str) -> SyntheticScene:
    """Load a scene directory; targets are re-rendered from the stored Gaussians."""
    manifest = read_manifest(directory)
    if manifest.convention != config.COORDINATE_CONVENTION:
        raise FormatError(f"scene convention {manifest.convention} is not {config.COORDINATE_CONVENTION}")
    with open(os.path.join(directory, manifest.conditions_file), "r", encoding="utf-8") as handle:
        conditions = ConditionManifest.model_validate(json.load(handle)).to_conditions()
    static: Optional[GaussianSet] = None
    dynamic = []
    for name in manifest.gaussian_files:
        gaussians, flags = read_gaussians(os.path.join(directory, name))
        if static is None:
            static = gaussians[~flags]
        dynamic.append(gaussians[flags])
    scene = SyntheticScene(
        seed=manifest.seed,
        cameras=read_rig(os.path.join(directory, manifest.rig_file)).to_cameras(),
        trajectory=manifest.trajectory.to_trajectory(),
        static=static if static is not None else GaussianSet.empty(),
        dynamic=dynamic,
        targets=None,
        conditions=conditions,
        d_min=manifest.d_min,
        d_max=manifest.d_max,
        n_dynamic=manifest.n_dynamic,
        background=tuple(manifest.background),
    )
    scene.targets = render_targets(
        scene.gaussians_at, scene.dynamic_flags_at, scene.cameras, scene.trajectory, scene.background
    )
    return scene
