import warnings

import numpy as np
import pytest
import torch
from torch import nn

from advface.config import ProtectionConfig
from advface.protect import (
    NumericError,
    ProtectionError,
    frozen_batch_stats,
    generate_adversarial,
    pgd_ascent,
    protect_dp,
    protect_features,
    protect_random,
    shadow_loss,
    shadow_loss_gradient,
    shadow_round_trip,
)

from oracles import laplace_mean_abs, uniform_sum_variance


class ElementwiseLinear(nn.Module):
    """S(z) = w * z with positive elementwise weights."""

    def __init__(self, w):
        super().__init__()
        self.register_buffer("w", torch.as_tensor(w))

    def forward(self, z):
        return self.w * z


class Identity(nn.Module):
    def forward(self, x):
        return x


def cfg(**kw):
    base = dict(alpha=0.2, epsilon=0.2, iterations=40, batch_size=64, bn_batch_stats=False)
    base.update(kw)
    return ProtectionConfig(**base)


# ---- sign semantics ---------------------------------------------------------

def test_sign_three_value_grid():
    grid = torch.tensor([-3.5, -0.0, 0.0, 7.1])
    assert torch.equal(torch.sign(grid), torch.tensor([-1.0, 0.0, 0.0, 1.0]))


# ---- gradients --------------------------------------------------------------

def test_gradient_linear_hand_case():
    w = torch.tensor([0.5, 2.0, 3.0])
    shadow = ElementwiseLinear(w)
    z = torch.tensor([1.0, 1.0, 1.0])
    x_tilde = shadow(z) - 1.0          # residual strictly positive
    grad = shadow_loss_gradient(shadow, z, x_tilde)
    assert torch.allclose(grad, w)


def test_gradient_zero_at_loss_minimum(tiny_decoder):
    torch.manual_seed(0)
    z = torch.randn(2, 4, 6, 6)
    x_tilde = tiny_decoder(z).detach()
    grad = shadow_loss_gradient(tiny_decoder, z, x_tilde)
    assert torch.all(grad == 0.0)


def test_gradient_matches_finite_differences(tiny_decoder):
    model = tiny_decoder.double()
    torch.manual_seed(3)
    z = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    offset = (torch.rand_like(model(z)) * 0.3 + 0.2) * torch.sign(torch.randn_like(model(z)))
    x_tilde = (model(z) - offset).detach()
    grad = shadow_loss_gradient(model, z, x_tilde)

    h = 1e-3
    rng = np.random.default_rng(7)
    flat = z.flatten()
    for idx in rng.choice(flat.numel(), size=20, replace=False):
        zp, zm = flat.clone(), flat.clone()
        zp[idx] += h
        zm[idx] -= h
        with torch.no_grad():
            fp = float(shadow_loss(model, zp.view_as(z), x_tilde))
            fm = float(shadow_loss(model, zm.view_as(z), x_tilde))
        fd = (fp - fm) / (2 * h)
        an = float(grad.flatten()[idx])
        assert abs(fd - an) <= 1e-3 * max(1.0, abs(fd)), (idx, fd, an)


def test_gradient_nonfinite_reports_diagnostics():
    class Exploder(nn.Module):
        def forward(self, z):
            return z / (z - z)   # 0/0 -> NaN everywhere

    with pytest.raises(NumericError):
        shadow_loss_gradient(Exploder(), torch.ones(2, 2), torch.zeros(2, 2))


# ---- PGD ascent -------------------------------------------------------------

def test_linear_model_saturates_ball_exactly():
    torch.manual_seed(0)
    w = torch.rand(3, 4, 4) * 1.5 + 1.5      # w > 1
    shadow = ElementwiseLinear(w)
    z_tilde = torch.rand(2, 3, 4, 4) + 0.5
    x_tilde = shadow(z_tilde) - 1.0          # residual positive throughout the ball
    c = cfg()
    z_adv = pgd_ascent(shadow, z_tilde, x_tilde, c)
    assert torch.equal(z_adv, z_tilde + c.epsilon)


def test_linear_model_full_pipeline_saturates():
    torch.manual_seed(1)
    w = torch.rand(2, 3, 3) + 1.5            # w > 1 so the round-trip residual is positive
    shadow = ElementwiseLinear(w)
    z = torch.rand(4, 2, 3, 3) + 0.5
    c = cfg()
    z_adv = generate_adversarial(shadow, Identity(), z, c)
    z_tilde = w * z
    assert torch.equal(z_adv, z_tilde + c.epsilon)


def test_epsilon_zero_returns_z_tilde_bit_exact(tiny_decoder):
    torch.manual_seed(2)
    z_tilde = torch.randn(3, 4, 6, 6)
    x_tilde = torch.rand(3, 3, 12, 12)
    out = pgd_ascent(tiny_decoder, z_tilde, x_tilde, cfg(epsilon=0.0))
    assert torch.equal(out, z_tilde)


def test_zero_iterations_returns_z_tilde(tiny_decoder):
    z_tilde = torch.randn(2, 4, 6, 6)
    x_tilde = torch.rand(2, 3, 12, 12)
    out = pgd_ascent(tiny_decoder, z_tilde, x_tilde, cfg(iterations=0))
    assert torch.equal(out, z_tilde)


def test_ball_bound_holds_on_random_model(tiny_decoder):
    torch.manual_seed(4)
    z_tilde = torch.randn(64, 4, 6, 6)
    x_tilde = torch.rand(64, 3, 12, 12)
    c = cfg(alpha=0.07, epsilon=0.15, iterations=11)
    z_adv = pgd_ascent(tiny_decoder, z_tilde, x_tilde, c)
    assert float((z_adv - z_tilde).abs().max()) <= c.epsilon + 1e-6


def test_ascent_does_not_decrease_loss(tiny_decoder):
    torch.manual_seed(5)
    z_tilde = torch.randn(8, 4, 6, 6)
    x_tilde = torch.rand(8, 3, 12, 12)
    c = cfg(alpha=0.05, iterations=12)
    z_adv = pgd_ascent(tiny_decoder, z_tilde, x_tilde, c)
    with torch.no_grad():
        before = float(shadow_loss(tiny_decoder, z_tilde, x_tilde))
        after = float(shadow_loss(tiny_decoder, z_adv, x_tilde))
    assert after >= before


def test_step_projection_can_exceed_ball(tiny_decoder):
    # the per-step reading bounds each iteration, not the total drift
    torch.manual_seed(6)
    w = torch.ones(2, 3, 3) * 2.0
    shadow = ElementwiseLinear(w)
    z_tilde = torch.ones(1, 2, 3, 3)
    x_tilde = shadow(z_tilde) - 5.0
    c = cfg(projection="step", alpha=0.2, epsilon=0.2, iterations=5)
    z_adv = pgd_ascent(shadow, z_tilde, x_tilde, c)
    assert torch.allclose(z_adv, z_tilde + 5 * 0.2)


def test_untouched_coordinates_stay_put():
    # half the input never reaches the output: its gradient is zero -> sign 0
    class HalfBlind(nn.Module):
        def forward(self, z):
            return z[:, :1] * 2.0

    z_tilde = torch.ones(1, 2, 4, 4)
    x_tilde = torch.zeros(1, 1, 4, 4)
    out = pgd_ascent(HalfBlind(), z_tilde, x_tilde, cfg(iterations=3))
    assert torch.equal(out[:, 1], z_tilde[:, 1])
    assert torch.all(out[:, 0] != z_tilde[:, 0])


# ---- batch-statistics mode ---------------------------------------------------

def test_batch_stats_duplication_invariance(tiny_decoder):
    torch.manual_seed(7)
    z = torch.randn(6, 4, 6, 6)
    c = cfg(bn_batch_stats=True, batch_size=64)
    single = shadow_round_trip(tiny_decoder, Identity(), z, c)
    doubled = shadow_round_trip(tiny_decoder, Identity(), torch.cat([z, z]), c)
    assert torch.allclose(single.x_tilde, doubled.x_tilde[:6], atol=1e-5)
    assert torch.allclose(single.x_tilde, doubled.x_tilde[6:], atol=1e-5)


def test_batch_stats_differ_from_running_stats(tiny_decoder):
    torch.manual_seed(8)
    z = torch.randn(6, 4, 6, 6) * 3.0 + 1.0   # far from the BN init statistics
    on = shadow_round_trip(tiny_decoder, Identity(), z, cfg(bn_batch_stats=True))
    off = shadow_round_trip(tiny_decoder, Identity(), z, cfg(bn_batch_stats=False))
    assert not torch.allclose(on.x_tilde, off.x_tilde, atol=1e-4)


def test_batch_stats_restore_model_state(tiny_decoder):
    bn = [m for m in tiny_decoder.modules() if isinstance(m, nn.BatchNorm2d)][0]
    before_mean = bn.running_mean.clone()
    before_var = bn.running_var.clone()
    before_tracked = bn.num_batches_tracked.clone()
    z = torch.randn(4, 4, 6, 6)
    with frozen_batch_stats(tiny_decoder, z):
        assert not torch.allclose(bn.running_mean, before_mean)
    assert torch.equal(bn.running_mean, before_mean)
    assert torch.equal(bn.running_var, before_var)
    assert torch.equal(bn.num_batches_tracked, before_tracked)
    assert not bn.training


def test_batch_stats_single_feature_falls_back_with_warning(tiny_decoder):
    z = torch.randn(1, 4, 6, 6)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        on = shadow_round_trip(tiny_decoder, Identity(), z, cfg(bn_batch_stats=True))
    assert any("running statistics" in str(w.message) for w in caught)
    off = shadow_round_trip(tiny_decoder, Identity(), z, cfg(bn_batch_stats=False))
    assert torch.equal(on.x_tilde, off.x_tilde)


def test_round_trip_finite_on_zero_feature(tiny_decoder):
    z = torch.zeros(2, 4, 6, 6)
    rt = shadow_round_trip(tiny_decoder, Identity(), z, cfg())
    assert torch.isfinite(rt.x_tilde).all()
    assert torch.isfinite(rt.z_tilde).all()


def test_generate_adversarial_respects_batching(tiny_decoder, tiny_extractor):
    torch.manual_seed(9)
    z = torch.randn(10, 4, 6, 6)
    c_whole = cfg(batch_size=10, iterations=3)
    c_split = cfg(batch_size=3, iterations=3)
    whole = generate_adversarial(tiny_decoder, tiny_extractor, z, c_whole)
    split = generate_adversarial(tiny_decoder, tiny_extractor, z, c_split)
    # without batch-stat coupling the grouping cannot change results
    assert torch.allclose(whole, split, atol=1e-6)


# ---- baselines ---------------------------------------------------------------

def test_random_zero_bound_is_identity():
    z = torch.randn(3, 5)
    assert torch.equal(protect_random(z, iterations=40, per_step_bound=0.0, seed=1), z)


def test_random_deterministic_per_seed():
    z = torch.randn(3, 5)
    a = protect_random(z, 10, 0.2, seed=42)
    b = protect_random(z, 10, 0.2, seed=42)
    c = protect_random(z, 10, 0.2, seed=43)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_random_displacement_variance_matches_analytic():
    z = torch.zeros(200_000)
    out = protect_random(z, iterations=40, per_step_bound=0.2, seed=0)
    var = float(out.var())
    expected = uniform_sum_variance(40, 0.2)
    assert var == pytest.approx(expected, rel=0.03)


def test_dp_scale_and_mean_abs():
    z = torch.zeros(200_000)
    out = protect_dp(z, privacy_budget=1.0, seed=0, noise_bound=0.2)
    assert float(out.abs().mean()) == pytest.approx(laplace_mean_abs(0.2), rel=0.02)


def test_dp_budget_to_infinity_recovers_feature():
    z = torch.randn(10_000)
    out = protect_dp(z, privacy_budget=1e6, seed=0)
    assert float((out - z).abs().max()) < 1e-3


def test_dp_rejects_nonpositive_budget():
    with pytest.raises(ProtectionError):
        protect_dp(torch.zeros(3), privacy_budget=0.0, seed=0)


def test_protect_features_dispatch(tiny_decoder, tiny_extractor):
    torch.manual_seed(10)
    z = torch.randn(6, 4, 6, 6)
    c = cfg(iterations=2, batch_size=6)
    z_tilde = protect_features("none", tiny_decoder, tiny_extractor, z, c, seed=5)
    adv = protect_features("advface", tiny_decoder, tiny_extractor, z, c, seed=5)
    rnd = protect_features("random", tiny_decoder, tiny_extractor, z, c, seed=5)
    dp = protect_features("dp", tiny_decoder, tiny_extractor, z, c, seed=5)
    assert float((adv - z_tilde).abs().max()) <= c.epsilon + 1e-6
    assert not torch.equal(rnd, z_tilde) and not torch.equal(dp, z_tilde)
    with pytest.raises(ProtectionError):
        protect_features("unknown", tiny_decoder, tiny_extractor, z, c, seed=5)


def test_advface_epsilon_zero_equals_none(tiny_decoder, tiny_extractor):
    torch.manual_seed(11)
    z = torch.randn(4, 4, 6, 6)
    c = cfg(epsilon=0.0, batch_size=4)
    z_tilde = protect_features("none", tiny_decoder, tiny_extractor, z, c, seed=5)
    adv = protect_features("advface", tiny_decoder, tiny_extractor, z, c, seed=5)
    assert torch.equal(adv, z_tilde)
