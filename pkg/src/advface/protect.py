"""Adversarial feature generation and the baseline feature defenses.

The defense pipeline per feature batch:

1. round-trip the uploaded features through the shadow decoder and the
   extractor: x_tilde = S(z), z_tilde = E(x_tilde);
2. ascend the shadow reconstruction loss |S(z_t) - x_tilde|_1 from
   z_0 = z_tilde by signed gradient steps of size alpha, keeping the
   perturbation inside an L-inf ball of radius epsilon around z_tilde;
3. store the final iterate instead of the original feature.

When ``bn_batch_stats`` is on, the shadow model's BatchNorm layers normalize
with the mean/variance of the current feature batch instead of training-time
running statistics; those batch statistics are captured once per batch during
the round trip and stay frozen through the ascent iterations.
"""

from __future__ import annotations

import contextlib
import logging
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .config import ProtectionConfig

log = logging.getLogger(__name__)


class ProtectionError(RuntimeError):
    pass


class NumericError(ProtectionError):
    """A forward/backward pass produced non-finite values."""


@dataclass
class ShadowRoundTrip:
    x_tilde: torch.Tensor      # shadow images, (N, 3, S, S)
    z_tilde: torch.Tensor      # re-extracted shadow features, (N, C, H, W)


@contextlib.contextmanager
def frozen_batch_stats(module: nn.Module, batch: torch.Tensor):
    """Make BatchNorm layers normalize with `batch`'s statistics, frozen.

    One capture forward runs with every BN layer in batch-statistics mode
    (running buffers untouched) while hooks record each layer's per-channel
    input mean and biased variance. The recorded values are then installed as
    the running statistics and the layers switched to eval, so every forward
    inside the context normalizes with the same frozen batch statistics.
    Restores all BN state on exit.
    """
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        yield
        return
    saved = [
        (bn.training, bn.momentum,
         bn.running_mean.clone(), bn.running_var.clone(), bn.num_batches_tracked.clone())
        for bn in bns
    ]
    captured: dict[nn.Module, tuple[torch.Tensor, torch.Tensor]] = {}

    def make_hook(bn):
        def hook(_module, inputs):
            x = inputs[0]
            dims = tuple(d for d in range(x.dim()) if d != 1)
            captured[bn] = (x.mean(dims).detach(), x.var(dims, unbiased=False).detach())
        return hook

    handles = [bn.register_forward_pre_hook(make_hook(bn)) for bn in bns]
    try:
        for bn in bns:
            bn.momentum = 0.0    # batch-stat normalization without buffer updates
            bn.train()
        with torch.no_grad():
            module(batch)
        for handle in handles:
            handle.remove()
        handles = []
        for bn in bns:
            mean, var = captured[bn]
            bn.running_mean.copy_(mean)
            bn.running_var.copy_(var)
            bn.eval()
        yield
    finally:
        for handle in handles:
            handle.remove()
        for bn, (training, momentum, mean, var, tracked) in zip(bns, saved):
            bn.momentum = momentum
            bn.running_mean.copy_(mean)
            bn.running_var.copy_(var)
            bn.num_batches_tracked.copy_(tracked)
            bn.train(training)


def _stats_context(shadow: nn.Module, batch: torch.Tensor, config: ProtectionConfig):
    if not config.bn_batch_stats:
        return contextlib.nullcontext()
    if batch.shape[0] < 2:
        warnings.warn("bn_batch_stats needs a batch of >= 2 features; "
                      "falling back to running statistics", stacklevel=3)
        return contextlib.nullcontext()
    return frozen_batch_stats(shadow, batch)


def _round_trip(shadow: nn.Module, extractor: nn.Module, z: torch.Tensor) -> ShadowRoundTrip:
    with torch.no_grad():
        x_tilde = shadow(z)
        z_tilde = extractor(x_tilde)
    if not torch.isfinite(x_tilde).all() or not torch.isfinite(z_tilde).all():
        raise NumericError("shadow round trip produced non-finite values")
    return ShadowRoundTrip(x_tilde=x_tilde, z_tilde=z_tilde)


def _as_module(model) -> nn.Module:
    module = getattr(model, "module", model)
    module.eval()
    return module


def shadow_round_trip(shadow, extractor, z: torch.Tensor,
                      config: ProtectionConfig) -> ShadowRoundTrip:
    """x_tilde = S(z), z_tilde = E(x_tilde), as one batch.

    With config.bn_batch_stats the shadow normalizes with this batch's
    statistics (falling back to running statistics for a single feature).
    """
    shadow_m, extractor_m = _as_module(shadow), _as_module(extractor)
    with _stats_context(shadow_m, z, config):
        return _round_trip(shadow_m, extractor_m, z)


def shadow_loss(shadow, z: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    """Sum of absolute pixel residuals between S(z) and the fixed target x_tilde."""
    return (shadow(z) - x_tilde).abs().sum()


def shadow_loss_gradient(shadow, z_pert: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    """Gradient of the shadow reconstruction loss w.r.t. the perturbed feature.

    x_tilde is treated as a constant; at exact zeros of the residual the
    subgradient is 0.
    """
    shadow_m = _as_module(shadow)
    z = z_pert.detach().clone().requires_grad_(True)
    loss = shadow_loss(shadow_m, z, x_tilde.detach())
    if not torch.isfinite(loss):
        raise NumericError(f"shadow loss is non-finite (loss={float(loss)!r})")
    (grad,) = torch.autograd.grad(loss, z)
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise NumericError(f"shadow loss gradient has {bad} non-finite entries")
    return grad


def pgd_ascent(shadow, z_tilde: torch.Tensor, x_tilde: torch.Tensor,
               config: ProtectionConfig) -> torch.Tensor:
    """Projected sign-gradient ascent on the shadow reconstruction loss.

    Starts at z_tilde (zero perturbation). projection="ball" clamps the
    accumulated perturbation into [-epsilon, +epsilon] after every step;
    projection="step" instead bounds each single step by epsilon and lets the
    total drift grow.
    """
    shadow_m = _as_module(shadow)
    z_tilde = z_tilde.detach()
    if config.iterations == 0 or config.epsilon == 0.0:
        return z_tilde.clone()
    delta = torch.zeros_like(z_tilde)
    for t in range(config.iterations):
        try:
            grad = shadow_loss_gradient(shadow_m, z_tilde + delta, x_tilde)
        except NumericError as exc:
            raise NumericError(f"iteration {t}: {exc}") from exc
        step = config.alpha * torch.sign(grad)
        if config.projection == "ball":
            delta = torch.clamp(delta + step, -config.epsilon, config.epsilon)
        else:
            delta = delta + torch.clamp(step, -config.epsilon, config.epsilon)
    return z_tilde + delta


def generate_adversarial(shadow, extractor, z: torch.Tensor,
                         config: ProtectionConfig) -> torch.Tensor:
    """Protect a feature tensor batch end to end (round trip + ascent).

    Features are processed in config.batch_size groups in arrival order; in
    bn_batch_stats mode each group's batch statistics are captured once and
    frozen through its ascent iterations.
    """
    shadow_m, extractor_m = _as_module(shadow), _as_module(extractor)
    outs = []
    for zb in z.split(config.batch_size):
        with _stats_context(shadow_m, zb, config):
            rt = _round_trip(shadow_m, extractor_m, zb)
            outs.append(pgd_ascent(shadow_m, rt.z_tilde, rt.x_tilde, config))
    return torch.cat(outs)


def round_trip_features(shadow, extractor, z: torch.Tensor,
                        config: ProtectionConfig) -> torch.Tensor:
    """Just the shadow features z_tilde, batched like generate_adversarial."""
    shadow_m, extractor_m = _as_module(shadow), _as_module(extractor)
    outs = []
    for zb in z.split(config.batch_size):
        with _stats_context(shadow_m, zb, config):
            outs.append(_round_trip(shadow_m, extractor_m, zb).z_tilde)
    return torch.cat(outs)


def protect_random(z_tilde: torch.Tensor, iterations: int, per_step_bound: float,
                   seed: int) -> torch.Tensor:
    """Iteratively add uniform noise in [-bound, +bound] per element, no projection."""
    if per_step_bound < 0:
        raise ProtectionError(f"per-step bound must be >= 0, got {per_step_bound}")
    gen = torch.Generator().manual_seed(seed)
    out = z_tilde.detach().clone()
    for _ in range(iterations):
        noise = (torch.rand(z_tilde.shape, generator=gen) * 2.0 - 1.0) * per_step_bound
        out += noise
    return out


def protect_dp(z_tilde: torch.Tensor, privacy_budget: float, seed: int,
               noise_bound: float = 0.2) -> torch.Tensor:
    """Add Laplace noise with scale noise_bound / privacy_budget per element."""
    if privacy_budget <= 0:
        raise ProtectionError(f"privacy budget must be > 0, got {privacy_budget}")
    scale = noise_bound / privacy_budget
    gen = torch.Generator().manual_seed(seed)
    u = torch.rand(z_tilde.shape, generator=gen) - 0.5
    noise = -scale * torch.sign(u) * torch.log1p(-2.0 * u.abs().clamp(max=0.5 - 1e-7))
    return z_tilde.detach() + noise


def protect_features(defense: str, shadow, extractor, z: torch.Tensor,
                     config: ProtectionConfig, seed: int) -> torch.Tensor:
    """Apply one named defense to raw features z; all defenses start from z_tilde."""
    if defense == "advface":
        return generate_adversarial(shadow, extractor, z, config)
    z_tilde = round_trip_features(shadow, extractor, z, config)
    if defense == "none":
        return z_tilde
    if defense == "random":
        return protect_random(z_tilde, config.iterations, config.random_bound, seed)
    if defense == "dp":
        return protect_dp(z_tilde, config.dp_budget, seed, config.dp_noise_bound)
    raise ProtectionError(f"unknown defense {defense!r}")
