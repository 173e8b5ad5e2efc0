"""
Fast self-checks run by ``main.py selftest``: renderer oracle equivalence,
gradient checks against central finite differences, rectified-flow oracles
and the 4D aggregation identity. ``--full`` adds the training runs in
acceptance.py.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch

import config
from decoder_net import CrossViewAttention, LatentGaussianDecoder, TemporalAttention, decoder_loss
from flow import Schedule, VelocityField, analytic_velocity_1d, euler_sample
from gaussians import GaussianFrame, GaussianSet, aggregate_4d
from geometry import DTYPE, Intrinsics, PoseSE3, quat_normalize
from rasterizer import ThresholdBound, render, render_reference, threshold_bound

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_gaussians(generator: torch.Generator, n: int, depth_range=(2.0, 8.0)) -> GaussianSet:
    """Random splats in front of an identity camera looking down +z."""
    u = lambda *shape: torch.rand(*shape, generator=generator, dtype=DTYPE)
    near, far = depth_range
    mu = torch.stack([4.0 * u(n) - 2.0, 4.0 * u(n) - 2.0, near + (far - near) * u(n)], dim=-1)
    return GaussianSet(
        mu=mu,
        rot=quat_normalize(torch.randn(n, 4, generator=generator, dtype=DTYPE)),
        scale=torch.exp(-3.0 + 2.0 * u(n, 3)),
        opacity=0.05 + 0.9 * u(n),
        color=u(n, 3),
    )


SELFTEST_INTRINSICS = Intrinsics(30.0, 30.0, 16.0, 16.0, 32, 32)


def max_render_difference(a, b, covered: float = 1e-3) -> float:
    """Largest rgb/alpha difference, and depth difference where ``b`` has alpha above ``covered``."""
    visible = b.alpha > covered
    depth = (a.depth - b.depth).abs()[visible]
    return max(
        float((a.rgb - b.rgb).abs().max()),
        float(depth.max()) if depth.numel() else 0.0,
        float((a.alpha - b.alpha).abs().max()),
    )


def threshold_excess(tiled, exact, bound: ThresholdBound) -> float:
    """How far a thresholded render leaves its drift bound; 0 when inside."""
    rgb = (tiled.rgb - exact.rgb).abs() - bound.colour.unsqueeze(-1)
    alpha = (tiled.alpha - exact.alpha).abs() - bound.colour
    finite = torch.isfinite(bound.depth)
    depth = ((tiled.depth - exact.depth).abs() - bound.depth)[finite]
    return max(
        0.0,
        float(rgb.max()),
        float(alpha.max()),
        float(depth.max()) if depth.numel() else 0.0,
    )


def check_rasterizer_equivalence(n_scenes: int = 50, max_gaussians: int = 500, seed: int = 0) -> CheckResult:
    """Tiled renderer against the exact dense reference.

    With thresholds off both must agree within 1e-6. With the default
    thresholds the tiled render must stay inside ``threshold_bound``.
    """
    generator = torch.Generator().manual_seed(seed)
    pose = PoseSE3.identity()
    worst_exact = worst_default = worst_excess = 0.0
    for _ in range(n_scenes):
        n = int(torch.randint(1, max_gaussians + 1, (1,), generator=generator))
        gaussians = random_gaussians(generator, n)
        exact = render_reference(gaussians, SELFTEST_INTRINSICS, pose, out_dtype=DTYPE)
        tiled_exact = render(gaussians, SELFTEST_INTRINSICS, pose, thresholds=False, out_dtype=DTYPE)
        worst_exact = max(worst_exact, max_render_difference(tiled_exact, exact))

        tiled = render(gaussians, SELFTEST_INTRINSICS, pose, out_dtype=DTYPE)
        bound = threshold_bound(gaussians, SELFTEST_INTRINSICS, pose)
        worst_default = max(worst_default, max_render_difference(tiled, exact))
        worst_excess = max(worst_excess, threshold_excess(tiled, exact, bound))
    passed = worst_exact <= 1e-6 and worst_excess <= 1e-9
    return CheckResult(
        "rasterizer-equivalence", passed,
        f"{n_scenes} scenes, max |diff| {worst_exact:.2e} with thresholds off, "
        f"{worst_default:.2e} with defaults (outside skip/early-out bound by {worst_excess:.2e})",
    )


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, indices: Sequence[int], eps: float):
    """d fn / d tensor.flatten()[i] by central differences, restoring the tensor afterwards."""
    flat = tensor.data.view(-1)
    estimates = []
    for i in indices:
        original = float(flat[i])
        flat[i] = original + eps
        upper = float(fn())
        flat[i] = original - eps
        lower = float(fn())
        flat[i] = original
        estimates.append((upper - lower) / (2.0 * eps))
    return torch.tensor(estimates, dtype=DTYPE)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def check_flow_gradients(seed: int = 0) -> CheckResult:
    field = VelocityField(6, cond_dim=3, width=16, hidden_layers=2, seed=seed)
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 6, generator=generator, dtype=DTYPE, requires_grad=True)
    s = torch.rand(4, generator=generator, dtype=DTYPE)
    cond = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    ok = torch.autograd.gradcheck(lambda x: field(x, s, cond), (z,), eps=1e-6, atol=1e-8, rtol=1e-4, raise_exception=False)

    weight = field.input.weight
    loss_fn = lambda: (field(z.detach(), s, cond) ** 2).sum()
    analytic = torch.autograd.grad(loss_fn(), weight)[0].reshape(-1)[:8]
    numeric = central_difference(lambda: loss_fn().detach(), weight, range(8), 1e-6)
    err = relative_error(analytic, numeric)
    return CheckResult("flow-gradients", bool(ok) and err < 1e-4, f"gradcheck={ok} weight rel err {err:.2e}")


def check_attention_gradients(seed: int = 0) -> CheckResult:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        cross = CrossViewAttention(8, 2).double()
        temporal = TemporalAttention(8, 2).double()
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 2, 2, 2, 2, 8, generator=generator, dtype=DTYPE, requires_grad=True)
    ok_cross = torch.autograd.gradcheck(cross, (x,), eps=1e-6, atol=1e-8, rtol=1e-4, raise_exception=False)
    ok_temporal = torch.autograd.gradcheck(temporal, (x,), eps=1e-6, atol=1e-8, rtol=1e-4, raise_exception=False)
    return CheckResult(
        "attention-gradients", bool(ok_cross and ok_temporal),
        f"cross-view={ok_cross} temporal={ok_temporal}",
    )


def check_render_gradients(seed: int = 0) -> CheckResult:
    generator = torch.Generator().manual_seed(seed)
    base = random_gaussians(generator, 6, depth_range=(3.0, 5.0))
    intr = Intrinsics(12.0, 12.0, 6.0, 6.0, 12, 12)
    pose = PoseSE3.identity()
    mu = base.mu.clone().requires_grad_(True)
    color = base.color.clone().requires_grad_(True)

    def loss():
        gs = GaussianSet(mu, base.rot, base.scale * 8.0, base.opacity, color)
        out = render(gs, intr, pose, thresholds=False, differentiable=True)
        return (out.rgb ** 2).sum() + 0.01 * (out.depth * out.alpha).sum()

    grad_mu, grad_color = torch.autograd.grad(loss(), (mu, color))
    with torch.no_grad():
        num_mu = central_difference(loss, mu, range(mu.numel()), 1e-6)
        num_color = central_difference(loss, color, range(color.numel()), 1e-6)
    err = max(relative_error(grad_mu.reshape(-1), num_mu), relative_error(grad_color.reshape(-1), num_color))
    return CheckResult("render-gradients", err < 1e-3, f"rel err {err:.2e}")


def check_decoder_loss_gradients(seed: int = 0) -> CheckResult:
    from synthdata import generate_scene

    scene = generate_scene(seed, V=1, T=2, H=8, W=8, n_static=30, n_dynamic=1)
    model = LatentGaussianDecoder(width=8, heads=2, blocks=1, upsample_stages=2, seed=seed)
    params = list(model.parameters())
    _, grads = decoder_loss(model, scene, 0, [1], clip_len=2)
    bias = model.head.bias
    index = [i for i, p in enumerate(params) if p is bias][0]
    analytic = grads[index]
    with torch.no_grad():
        numeric = central_difference(lambda: decoder_loss_value(model, scene), bias, range(bias.numel()), 1e-6)
    err = relative_error(analytic, numeric)
    return CheckResult("decoder-loss-gradients", err < 1e-3, f"head bias rel err {err:.2e}")


def decoder_loss_value(model, scene) -> float:
    with torch.enable_grad():
        loss, _ = decoder_loss(model, scene, 0, [1], clip_len=2)
    return float(loss)


def check_point_mass_flow(x0: float = 1.0, eps: float = 0.5) -> CheckResult:
    """The analytic point-mass field lands exactly on x0 for every step count."""
    field = lambda z, s, cond=None, extra=None: analytic_velocity_1d(z, s, x0)
    landed = {}
    for n in (1, 2, 4, 8, 16):
        z = euler_sample(field, torch.tensor([eps], dtype=DTYPE), Schedule(n))
        landed[n] = float(z[0])
    passed = all(v == x0 for v in landed.values())
    return CheckResult("point-mass-flow", passed, f"endpoints {landed}")


def check_aggregation_identity(n_configs: int = 100, seed: int = 0) -> CheckResult:
    """|G4D[t]| = Σ static + dynamic(t) and the static part is identical at every t."""
    generator = torch.Generator().manual_seed(seed)
    failures = 0
    for _ in range(n_configs):
        n_steps = int(torch.randint(1, 5, (1,), generator=generator))
        n_views = int(torch.randint(1, 4, (1,), generator=generator))
        poses = [PoseSE3.from_yaw(0.3 * t, [2.0 * t, 0.0, 0.0]) for t in range(n_steps)]
        frames = []
        for t in range(n_steps):
            for v in range(n_views):
                n = int(torch.randint(0, 12, (1,), generator=generator))
                flags = torch.rand(n, generator=generator) < 0.4
                frames.append(GaussianFrame(random_gaussians(generator, n), flags, t, f"cam{v}"))
        scene4d = aggregate_4d(frames, poses)
        n_static = sum(int((~f.dynamic_flags).sum()) for f in frames)
        for t in range(n_steps):
            n_dyn = sum(int(f.dynamic_flags.sum()) for f in frames if f.t == t)
            if len(scene4d[t]) != n_static + n_dyn:
                failures += 1
            if not torch.equal(scene4d[t].mu[:n_static], scene4d[0].mu[:n_static]):
                failures += 1
    return CheckResult("aggregation-identity", failures == 0, f"{n_configs} configurations, {failures} failures")


FAST_CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "rasterizer-equivalence": check_rasterizer_equivalence,
    "flow-gradients": check_flow_gradients,
    "attention-gradients": check_attention_gradients,
    "render-gradients": check_render_gradients,
    "decoder-loss-gradients": check_decoder_loss_gradients,
    "point-mass-flow": check_point_mass_flow,
    "aggregation-identity": check_aggregation_identity,
}


def run_checks(checks: Dict[str, Callable[[], CheckResult]], only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    results = []
    for name, check in checks.items():
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            result = check()
        except Exception as e:
            logger.exception(f"Check {name} raised")
            result = CheckResult(name, False, f"{type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        logger.info(f"{'PASS' if result.passed else 'FAIL'} {result.name} ({result.seconds:.1f}s): {result.detail}")
        results.append(result)
    return results


def run_selftest(full: bool = False, only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    checks = dict(FAST_CHECKS)
    if full:
        from acceptance import ACCEPTANCE_CHECKS

        checks.update(ACCEPTANCE_CHECKS)
    return run_checks(checks, only)


def all_passed(results: Sequence[CheckResult]) -> bool:
    return bool(results) and all(r.passed for r in results)
