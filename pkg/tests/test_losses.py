import math

import pytest
import torch

from xsgan.config import ConsistencyConfig, PenaltyConfig
from xsgan.errors import ContractError, NumericFault
from xsgan.losses import (adversarial_loss_d, adversarial_loss_g, consistency_loss,
                          generator_objective, gradient_penalty_approx)
from xsgan.pyramid import ScalePyramid


def _softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def test_equal_logits_give_ln2():
    d = torch.zeros(4, 3, dtype=torch.float64)
    assert float(adversarial_loss_d(d, d)) == pytest.approx(math.log(2), abs=1e-9)
    assert float(adversarial_loss_g(d, d)) == pytest.approx(math.log(2), abs=1e-9)


def test_saturated_margin_vanishes():
    real = torch.full((4, 3), 20.0, dtype=torch.float64)
    fake = torch.zeros(4, 3, dtype=torch.float64)
    assert float(adversarial_loss_d(real, fake)) < 1e-8
    assert float(adversarial_loss_g(fake, real)) < 1e-8


def test_two_scale_mean_value():
    # K=1: margin 0 at scale 0, margin +20 at scale 1
    real = torch.tensor([[0.0, 20.0]], dtype=torch.float64)
    fake = torch.zeros(1, 2, dtype=torch.float64)
    expected = (_softplus(0.0) + _softplus(-20.0)) / 2
    assert float(adversarial_loss_d(real, fake)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.3466, abs=5e-5)


def test_role_symmetry():
    torch.manual_seed(0)
    a = torch.randn(5, 4, dtype=torch.float64)
    b = torch.randn(5, 4, dtype=torch.float64)
    assert float(adversarial_loss_g(a, b)) == pytest.approx(
        float(adversarial_loss_d(b, a)), abs=1e-12)


def test_averaging_invariance():
    torch.manual_seed(1)
    real1 = torch.randn(6, 1, dtype=torch.float64)
    fake1 = torch.randn(6, 1, dtype=torch.float64)
    single = float(adversarial_loss_d(real1, fake1))
    replicated = float(adversarial_loss_d(real1.expand(6, 4), fake1.expand(6, 4)))
    assert replicated == pytest.approx(single, abs=1e-12)


def test_adversarial_shape_contract():
    with pytest.raises(ContractError):
        adversarial_loss_d(torch.zeros(2, 3), torch.zeros(2, 2))
    with pytest.raises(ContractError):
        adversarial_loss_d(torch.zeros(2), torch.zeros(2))


def test_consistency_fixed_point_and_worked_example():
    h = [torch.ones(2, 4, 4, 1, dtype=torch.float64) for _ in range(4)]
    cfg = ConsistencyConfig(weights=(1 / 3, 1 / 2, 1.0))
    assert float(consistency_loss(h, cfg)) == 0.0

    h0 = torch.zeros(1, 4, 4, 1, dtype=torch.float64)
    h0[0, 0, 0, 0] = 1.0  # ||h_0 - h_3||^2 = 1
    final = torch.zeros(1, 4, 4, 1, dtype=torch.float64)
    value = consistency_loss([h0, final.clone(), final.clone(), final], cfg)
    assert float(value) == pytest.approx(1 / 9, abs=1e-9)


def test_consistency_homogeneity():
    torch.manual_seed(2)
    h = [torch.randn(3, 4, 4, 2, dtype=torch.float64) for _ in range(3)]
    cfg = ConsistencyConfig(weights=(0.5, 1.0))
    base = float(consistency_loss(h, cfg))
    scaled = float(consistency_loss([2.5 * t for t in h], cfg))
    assert scaled == pytest.approx(2.5 ** 2 * base, rel=1e-12)
    assert base >= 0.0


def test_consistency_zero_iff_aligned():
    cfg = ConsistencyConfig(weights=(0.5, 1.0))
    final = torch.randn(2, 4, 4, 1, dtype=torch.float64)
    aligned = [final.clone(), final.clone(), final]
    assert float(consistency_loss(aligned, cfg)) == 0.0
    off = [final + 1e-3, final.clone(), final]
    assert float(consistency_loss(off, cfg)) > 0.0


def test_consistency_single_stage_warns_zero():
    with pytest.warns(UserWarning):
        value = consistency_loss([torch.randn(2, 4, 4, 1)], ConsistencyConfig(weights=()))
    assert float(value) == 0.0


def test_consistency_batch_mean_semantics():
    """Per-sample sums then a batch mean: doubling the batch by duplication
    leaves the loss unchanged."""
    torch.manual_seed(3)
    h = [torch.randn(2, 4, 4, 2, dtype=torch.float64) for _ in range(3)]
    cfg = ConsistencyConfig(weights=(0.5, 1.0))
    base = float(consistency_loss(h, cfg))
    doubled = [torch.cat([t, t]) for t in h]
    assert float(consistency_loss(doubled, cfg)) == pytest.approx(base, rel=1e-12)


def _pyr(xs):
    return ScalePyramid(x=xs, source="real")


def test_penalty_constant_discriminator_is_zero():
    cfg = PenaltyConfig()
    rng = torch.Generator().manual_seed(0)
    xs = [torch.randn(8, 4, 4, 1, dtype=torch.float64),
          torch.randn(8, 8, 8, 1, dtype=torch.float64)]

    def d_fn(parts):
        return torch.full((parts[0].shape[0], 2), 3.0, dtype=torch.float64)

    assert float(gradient_penalty_approx(d_fn, _pyr(xs), cfg, rng)) == 0.0


def test_penalty_linear_oracle_and_eps_independence():
    """For d(x) = <a, x> per scale the penalty equals mean (a . u)^2 exactly."""
    torch.manual_seed(4)
    xs = [torch.randn(8, 4, 4, 2, dtype=torch.float64),
          torch.randn(8, 8, 8, 2, dtype=torch.float64)]
    weights = [torch.randn_like(xs[0][0]), torch.randn_like(xs[1][0])]

    def d_fn(parts):
        cols = [(p * w).flatten(1).sum(1) for p, w in zip(parts, weights)]
        return torch.stack(cols, dim=1)

    for eps in (0.01, 1.0):
        cfg = PenaltyConfig(epsilon=eps, fraction=0.25)
        rng = torch.Generator().manual_seed(11)
        replay = torch.Generator()
        replay.set_state(rng.get_state())
        got = float(gradient_penalty_approx(d_fn, _pyr(xs), cfg, rng))
        n = int(round(cfg.fraction * xs[0].shape[0]))
        us = [torch.randn(t[:n].shape, generator=replay, dtype=t.dtype) for t in xs]
        dots = torch.stack([(u * w).flatten(1).sum(1) for u, w in zip(us, weights)], dim=1)
        expected = float(dots.pow(2).mean())
        assert got == pytest.approx(expected, rel=1e-9)


def test_penalty_subbatch_count():
    cfg = PenaltyConfig(fraction=0.25)
    rng = torch.Generator().manual_seed(0)
    seen = []

    def d_fn(parts):
        seen.append(parts[0].shape[0])
        return torch.zeros(parts[0].shape[0], 1, dtype=torch.float64)

    xs = [torch.randn(8, 4, 4, 1, dtype=torch.float64)]
    gradient_penalty_approx(d_fn, _pyr(xs), cfg, rng)
    assert seen == [2, 2]


def test_penalty_argument_errors():
    rng = torch.Generator()
    xs = [torch.randn(2, 4, 4, 1)]
    with pytest.raises(ValueError):
        gradient_penalty_approx(lambda p: torch.zeros(1, 1), _pyr(xs),
                                PenaltyConfig(epsilon=-1.0), rng)
    with pytest.raises(ContractError):
        gradient_penalty_approx(lambda p: torch.zeros(1, 1), _pyr(xs),
                                PenaltyConfig(fraction=0.1), rng)


def test_penalty_nonnegative():
    torch.manual_seed(5)
    rng = torch.Generator().manual_seed(6)
    xs = [torch.randn(4, 4, 4, 1, dtype=torch.float64)]
    lin = torch.randn_like(xs[0][0])

    def d_fn(parts):
        return (parts[0] * lin).flatten(1).sum(1, keepdim=True).tanh()

    assert float(gradient_penalty_approx(d_fn, _pyr(xs), PenaltyConfig(), rng)) >= 0.0


def test_generator_objective_values():
    cfg = ConsistencyConfig(lambda_cons=0.1, weights=(1 / 3, 1 / 2, 1.0))
    adv = torch.tensor(0.7, dtype=torch.float64)
    assert float(generator_objective(adv, torch.tensor(0.0, dtype=torch.float64), cfg)) \
        == pytest.approx(0.7, abs=1e-9)
    assert float(generator_objective(adv, torch.tensor(2.0, dtype=torch.float64), cfg)) \
        == pytest.approx(0.9, abs=1e-9)
    zero = ConsistencyConfig(lambda_cons=0.0, weights=(1 / 3, 1 / 2, 1.0))
    assert float(generator_objective(adv, torch.tensor(123.0, dtype=torch.float64), zero)) \
        == pytest.approx(0.7, abs=1e-12)


def test_generator_objective_non_finite_faults():
    cfg = ConsistencyConfig()
    with pytest.raises(NumericFault):
        generator_objective(torch.tensor(float("nan")), torch.tensor(0.0), cfg)
    with pytest.raises(NumericFault):
        generator_objective(torch.tensor(0.0), torch.tensor(float("inf")), cfg)


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(7)
    real = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    fake = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    for fn, wrt in ((adversarial_loss_d, real), (adversarial_loss_g, fake)):
        loss = fn(real, fake)
        (grad,) = torch.autograd.grad(loss, [wrt])
        idx = (0, 1)
        eps = 1e-6
        with torch.no_grad():
            wrt[idx] += eps
            up = float(fn(real, fake))
            wrt[idx] -= 2 * eps
            down = float(fn(real, fake))
            wrt[idx] += eps
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - float(grad[idx])) < 1e-6

    cfg = ConsistencyConfig(weights=(0.5, 1.0))
    h = [torch.randn(2, 4, 4, 1, dtype=torch.float64, requires_grad=True)
         for _ in range(3)]
    loss = consistency_loss(h, cfg)
    grads = torch.autograd.grad(loss, h)
    eps = 1e-6
    for t, g in zip(h, grads):
        with torch.no_grad():
            t[0, 0, 0, 0] += eps
            up = float(consistency_loss(h, cfg))
            t[0, 0, 0, 0] -= 2 * eps
            down = float(consistency_loss(h, cfg))
            t[0, 0, 0, 0] += eps
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - float(g[0, 0, 0, 0])) < 1e-6
