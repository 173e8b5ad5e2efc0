"""
Rectified flow: straight-line interpolation between noise and data, a
velocity-field network trained to regress x − ε, and forward Euler sampling
from noise (s = 0) to data (s = 1).

The same machinery trains the refiner; its velocity field takes the
(possibly degraded) render channels as extra input.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
import torch.nn as nn

import config
from conditions import ConditionEncoder, ConditionSet
from errors import (
    DivergedSamplingError,
    DivergedTrainingError,
    LengthMismatchError,
    PairingError,
    UndefinedOracleError,
)
from geometry import DTYPE

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

ConditionLike = Union[None, torch.Tensor, Sequence[ConditionSet]]


def interpolate(x: torch.Tensor, eps: torch.Tensor, s) -> torch.Tensor:
    """z(s) = (1 − s)·ε + s·x; ``s`` is a scalar or one value per row."""
    if x.shape != eps.shape:
        raise LengthMismatchError(f"data {tuple(x.shape)} and noise {tuple(eps.shape)} differ")
    s = torch.as_tensor(s, dtype=x.dtype)
    if bool(((s < 0) | (s > 1)).any()):
        raise ValueError("s must lie in [0, 1]")
    if s.dim() == 1 and x.dim() == 2:
        s = s.unsqueeze(-1)
    return (1 - s) * eps + s * x


@dataclass(frozen=True, eq=False)
class FlowSample:
    """A training triple and its interpolated state; z is always derived."""

    x: torch.Tensor
    eps: torch.Tensor
    s: float
    z: torch.Tensor = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "z", interpolate(self.x, self.eps, self.s))


@dataclass(frozen=True)
class Schedule:
    N: int = config.EULER_STEPS

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"Euler schedule needs at least one step, got {self.N}")


def sinusoidal_embedding(s: torch.Tensor, dim: int = config.S_EMBED_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=s.dtype))
    angles = s.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.linear = nn.Linear(width, width)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.linear(torch.nn.functional.silu(self.norm(h)))


class VelocityField(nn.Module):
    """g_ψ(z, s, cond[, extra]) → velocity of the same length as z."""

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int = 0,
        extra_dim: int = 0,
        width: int = config.FLOW_WIDTH,
        hidden_layers: int = config.FLOW_HIDDEN_LAYERS,
        s_embed_dim: int = config.S_EMBED_DIM,
        encoder: Optional[ConditionEncoder] = None,
        seed: int = 0,
    ):
        super().__init__()
        if encoder is not None:
            cond_dim = encoder.cond_width
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.extra_dim = extra_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.s_embed_dim = s_embed_dim
        self.seed = seed
        self.encoder = encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.input = nn.Linear(latent_dim + s_embed_dim + cond_dim + extra_dim, width)
            self.blocks = nn.ModuleList([ResidualBlock(width) for _ in range(hidden_layers)])
            self.output = nn.Linear(width, latent_dim)
        self.double()

    @property
    def layer_sizes(self) -> List[int]:
        encoder_steps = self.encoder.n_steps if self.encoder is not None else 0
        encoder_hidden = self.encoder.hidden if self.encoder is not None else 0
        return [
            self.latent_dim, self.cond_dim, self.extra_dim, self.width,
            self.hidden_layers, self.s_embed_dim, encoder_steps, encoder_hidden,
        ]

    def condition_vectors(self, cond: ConditionLike, batch: int) -> Optional[torch.Tensor]:
        """Resolve precomputed vectors or ConditionSets into a batch×cond_dim tensor."""
        if self.cond_dim == 0:
            return None
        if cond is None:
            return torch.zeros(batch, self.cond_dim, dtype=DTYPE)
        if isinstance(cond, torch.Tensor):
            cond = cond.to(DTYPE)
            return cond.expand(batch, -1) if cond.dim() == 1 else cond
        if self.encoder is None:
            raise LengthMismatchError("condition sets given to a field without a condition encoder")
        vectors = torch.stack([self.encoder(c) for c in cond])
        return vectors.expand(batch, -1) if vectors.shape[0] == 1 else vectors

    def forward(
        self,
        z: torch.Tensor,
        s: torch.Tensor,
        cond: ConditionLike = None,
        extra: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.latent_dim:
            raise LengthMismatchError(f"field expects latents of length {self.latent_dim}, got {z.shape[-1]}")
        batch = z.shape[0]
        s = torch.as_tensor(s, dtype=z.dtype).reshape(-1).expand(batch)
        parts = [z, sinusoidal_embedding(s, self.s_embed_dim)]
        cond_vec = self.condition_vectors(cond, batch)
        if cond_vec is not None:
            parts.append(cond_vec)
        if self.extra_dim:
            if extra is None:
                raise LengthMismatchError(f"field expects {self.extra_dim} extra input channels")
            extra = extra.to(z.dtype)
            parts.append(extra.unsqueeze(0).expand(batch, -1) if extra.dim() == 1 else extra)
        h = self.input(torch.cat(parts, dim=-1))
        for block in self.blocks:
            h = block(h)
        out = self.output(torch.nn.functional.silu(h))
        return out.squeeze(0) if squeeze else out


FieldLike = Callable[..., torch.Tensor]


def _stack_batch(batch: Union[FlowSample, Sequence[FlowSample]]):
    if isinstance(batch, FlowSample):
        x, eps, z = batch.x, batch.eps, batch.z
        s = torch.as_tensor(batch.s, dtype=x.dtype)
        if x.dim() == 1:
            return x.unsqueeze(0), eps.unsqueeze(0), s.reshape(1), z.unsqueeze(0)
        return x, eps, s.reshape(-1).expand(x.shape[0]), z
    if not batch:
        raise LengthMismatchError("empty batch")
    x = torch.stack([b.x.reshape(-1) for b in batch])
    eps = torch.stack([b.eps.reshape(-1) for b in batch])
    s = torch.as_tensor([float(b.s) for b in batch], dtype=x.dtype)
    z = torch.stack([b.z.reshape(-1) for b in batch])
    return x, eps, s, z


def flow_loss_and_grad(
    field: FieldLike,
    batch: Union[FlowSample, Sequence[FlowSample]],
    cond: ConditionLike = None,
    extra: Optional[torch.Tensor] = None,
    step: int = 0,
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, ...]]:
    """Mean ‖g(z, s, cond) − (x − ε)‖² and its gradient for every field parameter."""
    x, eps, s, z = _stack_batch(batch)
    prediction = field(z, s, cond, extra)
    loss = ((prediction - (x - eps)) ** 2).sum(dim=-1).mean()
    if not bool(torch.isfinite(loss)):
        raise DivergedTrainingError(
            "non-finite flow loss", step=step,
            diagnostics={"loss": float(loss), "max_abs_z": float(z.abs().max())},
        )
    params = [p for p in getattr(field, "parameters", lambda: [])() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True) if params else ()
    grads = tuple(torch.zeros_like(p) if g is None else g for p, g in zip(params, grads))
    return loss.detach(), grads


def guided_velocity(field: FieldLike, z, s, cond, extra, guidance: float) -> torch.Tensor:
    """v_u + w·(v_c − v_u); w = 1 is the plain conditional field."""
    v_cond = field(z, s, cond, extra)
    if guidance == 1.0 or cond is None:
        return v_cond
    cond_dim = getattr(field, "cond_dim", 0)
    batch = z.shape[0] if z.dim() == 2 else 1
    v_uncond = field(z, s, torch.zeros(batch, cond_dim, dtype=z.dtype), extra)
    return v_uncond + guidance * (v_cond - v_uncond)


@torch.no_grad()
def euler_sample(
    field: FieldLike,
    eps_init: torch.Tensor,
    schedule: Union[Schedule, int] = Schedule(),
    cond: ConditionLike = None,
    extra: Optional[torch.Tensor] = None,
    guidance: float = config.GUIDANCE_WEIGHT,
) -> torch.Tensor:
    """Integrate noise → data: z_{k+1} = z_k + (1/N)·g(z_k, k/N)."""
    if isinstance(schedule, int):
        schedule = Schedule(schedule)
    n_steps = schedule.N
    if isinstance(field, VelocityField) and cond is not None and not isinstance(cond, torch.Tensor):
        cond = field.condition_vectors(cond, 1)
    z = eps_init.clone()
    for k in range(n_steps):
        s = torch.full((z.shape[0],) if z.dim() == 2 else (), k / n_steps, dtype=z.dtype)
        v = guided_velocity(field, z, s, cond, extra, guidance)
        z = z + (1.0 / n_steps) * v
        if not bool(torch.isfinite(z).all()):
            raise DivergedSamplingError(f"non-finite state at Euler step {k + 1}/{n_steps}")
    return z


def analytic_velocity_1d(z, s, x0):
    """E[x − ε | z(s) = z] for point-mass data at x0: x0 − (z − s·x0)/(1 − s)."""
    s_t = torch.as_tensor(s, dtype=DTYPE)
    if bool((s_t >= 1).any()):
        raise UndefinedOracleError("the point-mass velocity is undefined at s = 1")
    result = x0 - (torch.as_tensor(z, dtype=DTYPE) - s_t * x0) / (1 - s_t)
    return float(result) if result.dim() == 0 else result


@dataclass(frozen=True)
class FlowOptimizerConfig:
    lr: float = config.FLOW_LR
    momentum: float = config.FLOW_MOMENTUM
    batch_size: int = config.FLOW_BATCH_SIZE
    grad_clip: float = config.GRAD_CLIP
    cond_dropout: float = config.COND_DROPOUT


def _apply_gradients(optimizer, params, grads, grad_clip: float) -> float:
    for p, g in zip(params, grads):
        p.grad = g
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(norm)


def _train_loop(
    field: VelocityField,
    draw_batch: Callable[[torch.Generator], tuple],
    steps: int,
    optimizer_config: FlowOptimizerConfig,
    seed: int,
    checkpoint_path: Optional[str],
    log_every: int,
    label: str,
) -> Tuple[VelocityField, pd.DataFrame]:
    from formats import save_velocity_field

    generator = torch.Generator().manual_seed(seed)
    params = [p for p in field.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=optimizer_config.lr, momentum=optimizer_config.momentum)
    history = []
    last_good = None
    for step in range(1, steps + 1):
        x, cond, extra = draw_batch(generator)
        eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
        s = torch.rand(x.shape[0], generator=generator, dtype=DTYPE)
        sample = FlowSample(x, eps, s)
        try:
            loss, grads = flow_loss_and_grad(field, sample, cond, extra, step=step)
        except DivergedTrainingError as exc:
            raise DivergedTrainingError(
                "non-finite flow loss", step=step, diagnostics=exc.diagnostics, last_good_checkpoint=last_good
            ) from exc
        grad_norm = _apply_gradients(optimizer, params, grads, optimizer_config.grad_clip)
        history.append({"step": step, "loss": float(loss)})
        if step % log_every == 0 or step == steps:
            logger.info(f"{label} step {step}/{steps} loss={float(loss):.6f} grad_norm={grad_norm:.4f}")
        if checkpoint_path and (step % config.CHECKPOINT_EVERY == 0 or step == steps):
            save_velocity_field(field, checkpoint_path)
            last_good = checkpoint_path
    return field, pd.DataFrame(history, columns=["step", "loss"])


def _drop_conditions(cond: Optional[torch.Tensor], rate: float, generator: torch.Generator):
    if cond is None or rate <= 0:
        return cond
    keep = torch.rand(cond.shape[0], generator=generator, dtype=DTYPE) >= rate
    return cond * keep.unsqueeze(-1).to(cond.dtype)


def train_flow(
    dataset: torch.Tensor,
    cond_source: ConditionLike = None,
    steps: int = config.FLOW_TRAIN_STEPS,
    optimizer_config: FlowOptimizerConfig = FlowOptimizerConfig(),
    seed: int = 0,
    field: Optional[VelocityField] = None,
    checkpoint_path: Optional[str] = None,
    log_every: int = config.LOG_EVERY,
) -> Tuple[VelocityField, pd.DataFrame]:
    """Seeded SGD-with-momentum training of a velocity field on M×D data.

    Args:
        dataset: M flattened latents.
        cond_source: M×cond_dim condition vectors, or M ConditionSets embedded by
            the field's own encoder, or None for an unconditional model.
        steps: Optimizer steps.
        optimizer_config: Learning rate, momentum, batch size, clip and dropout.
        seed: Seeds initialisation and every random draw.
        field: Field to continue training; a fresh one is built when omitted.
        checkpoint_path: Where periodic RFLW checkpoints go.

    Returns:
        The trained field and a DataFrame of (step, loss).
    """
    dataset = torch.as_tensor(dataset, dtype=DTYPE)
    if dataset.dim() == 1:
        dataset = dataset.unsqueeze(-1)
    if dataset.shape[0] == 0:
        raise LengthMismatchError("flow training needs a non-empty dataset")
    n_items = dataset.shape[0]
    if cond_source is not None and len(cond_source) != n_items:
        raise LengthMismatchError(f"{len(cond_source)} conditions for {n_items} samples")
    if field is None:
        cond_dim = 0
        if isinstance(cond_source, torch.Tensor):
            cond_dim = cond_source.shape[-1]
        encoder = None
        if cond_source is not None and not isinstance(cond_source, torch.Tensor):
            encoder = ConditionEncoder(len(cond_source[0].trajectory), seed=seed)
        field = VelocityField(dataset.shape[1], cond_dim=cond_dim, encoder=encoder, seed=seed)

    def draw_batch(generator):
        idx = torch.randint(n_items, (optimizer_config.batch_size,), generator=generator)
        cond = None
        if isinstance(cond_source, torch.Tensor):
            cond = cond_source.to(DTYPE)[idx]
        elif cond_source is not None:
            cond = field.condition_vectors([cond_source[int(i)] for i in idx], len(idx))
        return dataset[idx], _drop_conditions(cond, optimizer_config.cond_dropout, generator), None

    logger.info(f"Training flow on {n_items} samples of length {dataset.shape[1]} for {steps} steps")
    return _train_loop(field, draw_batch, steps, optimizer_config, seed, checkpoint_path, log_every, "flow")


def train_refiner(
    clean_latents: torch.Tensor,
    degraded_renders: torch.Tensor,
    mix_ratio: float = config.REFINER_MIX_RATIO,
    clean_renders: Optional[torch.Tensor] = None,
    cond_source: Optional[torch.Tensor] = None,
    steps: int = config.REFINER_TRAIN_STEPS,
    optimizer_config: FlowOptimizerConfig = FlowOptimizerConfig(),
    seed: int = 0,
    field: Optional[VelocityField] = None,
    checkpoint_path: Optional[str] = None,
    log_every: int = config.LOG_EVERY,
) -> Tuple[VelocityField, pd.DataFrame]:
    """Train the refiner: the clean latent is the target, renders are extra input.

    Each batch row is conditioned on its degraded render with probability
    ``mix_ratio`` and on its clean render otherwise. Clean renders default to
    the clean latents themselves (renders and latents share a layout at desk scale).
    """
    clean_latents = torch.as_tensor(clean_latents, dtype=DTYPE)
    degraded_renders = torch.as_tensor(degraded_renders, dtype=DTYPE)
    clean_renders = clean_latents if clean_renders is None else torch.as_tensor(clean_renders, dtype=DTYPE)
    n_items = clean_latents.shape[0]
    if n_items == 0:
        raise PairingError("refiner training needs at least one clean/degraded pair")
    if degraded_renders.shape[0] != n_items or clean_renders.shape[0] != n_items:
        raise PairingError(
            f"{n_items} clean latents, {degraded_renders.shape[0]} degraded and "
            f"{clean_renders.shape[0]} clean renders"
        )
    if degraded_renders.shape != clean_renders.shape:
        raise PairingError(
            f"degraded renders {tuple(degraded_renders.shape)} do not pair with clean renders "
            f"{tuple(clean_renders.shape)}"
        )
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError(f"mix ratio must lie in [0, 1], got {mix_ratio}")
    if field is None:
        cond_dim = 0 if cond_source is None else cond_source.shape[-1]
        field = VelocityField(
            clean_latents.shape[1], cond_dim=cond_dim, extra_dim=degraded_renders.shape[1], seed=seed
        )

    def draw_batch(generator):
        idx = torch.randint(n_items, (optimizer_config.batch_size,), generator=generator)
        use_degraded = torch.rand(len(idx), generator=generator, dtype=DTYPE) < mix_ratio
        renders = torch.where(use_degraded.unsqueeze(-1), degraded_renders[idx], clean_renders[idx])
        cond = None if cond_source is None else cond_source.to(DTYPE)[idx]
        return clean_latents[idx], _drop_conditions(cond, optimizer_config.cond_dropout, generator), renders

    logger.info(f"Training refiner on {n_items} pairs (mix ratio {mix_ratio}) for {steps} steps")
    return _train_loop(field, draw_batch, steps, optimizer_config, seed, checkpoint_path, log_every, "refiner")


def refine(
    field: VelocityField,
    renders: torch.Tensor,
    generator: torch.Generator,
    schedule: Union[Schedule, int] = Schedule(),
    cond: ConditionLike = None,
) -> torch.Tensor:
    """Sample a refined latent conditioned on flattened render channels."""
    eps = torch.randn(field.latent_dim, generator=generator, dtype=DTYPE)
    return euler_sample(field, eps, schedule, cond, extra=renders.to(DTYPE))
