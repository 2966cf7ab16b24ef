"""Training objectives: relativistic per-scale adversarial losses, the
cross-scale consistency term, and the approximated gradient penalty.

Logit tensors are [batch, K+1] with column k the scale-k prediction; real and
fake logits are paired per sample.
"""

import math
import warnings

import torch
import torch.nn.functional as F

from .config import ConsistencyConfig, PenaltyConfig
from .errors import ContractError, NumericFault
from .pyramid import ScalePyramid, StageOutputs


def _paired_logits(d_real, d_fake):
    if not (torch.is_tensor(d_real) and torch.is_tensor(d_fake)):
        raise ContractError("logits must be tensors")
    if d_real.ndim != 2 or d_fake.ndim != 2:
        raise ContractError(f"logits must be [batch, K+1], got {tuple(d_real.shape)} "
                            f"and {tuple(d_fake.shape)}")
    if d_real.shape != d_fake.shape:
        raise ContractError(f"real/fake logit shapes differ: {tuple(d_real.shape)} vs "
                            f"{tuple(d_fake.shape)}")
    return d_real, d_fake


def adversarial_loss_d(d_real, d_fake):
    """Mean over scales of the paired relativistic discriminator loss."""
    d_real, d_fake = _paired_logits(d_real, d_fake)
    return F.softplus(-(d_real - d_fake)).mean()


def adversarial_loss_g(d_real, d_fake):
    """Same pairing with the roles swapped; the caller keeps d_real detached."""
    d_real, d_fake = _paired_logits(d_real, d_fake)
    return F.softplus(-(d_fake - d_real)).mean()


def consistency_loss(stages, cfg: ConsistencyConfig):
    """(1/K) sum_k w_k ||h_k - h_K||^2, summed per sample, averaged over batch.

    Gradients flow into every stage including h_K (no stop-gradient).
    """
    h = stages.h if isinstance(stages, StageOutputs) else list(stages)
    if not h:
        raise ContractError("no stage outputs")
    num_k = len(h) - 1
    if num_k == 0:
        warnings.warn("consistency_loss with a single stage is identically 0",
                      stacklevel=2)
        return torch.zeros((), dtype=h[0].dtype, device=h[0].device)
    if len(cfg.weights) != num_k:
        raise ContractError(f"need {num_k} stage weights, got {len(cfg.weights)}")
    final = h[-1]
    per_sample = None
    for k in range(num_k):
        if h[k].shape != final.shape:
            raise ContractError(f"stage {k} shape {tuple(h[k].shape)} differs from "
                                f"final {tuple(final.shape)}")
        sq = (h[k] - final).flatten(1).pow(2).sum(dim=1)
        term = cfg.weights[k] * sq
        per_sample = term if per_sample is None else per_sample + term
    return (per_sample / num_k).mean()


def gradient_penalty_approx(d_fn, pyramid, cfg: PenaltyConfig, rng: torch.Generator):
    """Finite-difference gradient penalty on the first round(fraction*batch)
    samples: mean over scales and selected samples of (d(x+eps*u)-d(x))^2/eps^2.

    ``d_fn`` maps a list of per-scale image tensors to [n, K+1] logits; the
    penalty is a function of discriminator parameters only (the inputs stay
    constant), so no second-order gradients are involved.
    """
    if cfg.epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {cfg.epsilon}")
    xs = pyramid.x if isinstance(pyramid, ScalePyramid) else list(pyramid)
    if not xs:
        raise ContractError("empty pyramid")
    batch = xs[0].shape[0]
    n_sel = int(round(cfg.fraction * batch))
    if n_sel < 1:
        raise ContractError(f"fraction*batch must be >= 1, got {cfg.fraction}*{batch}")
    base = [t[:n_sel].detach() for t in xs]
    perturbed = [
        t + cfg.epsilon * torch.randn(t.shape, generator=rng, dtype=t.dtype, device=t.device)
        for t in base
    ]
    d0 = d_fn(base)
    d1 = d_fn(perturbed)
    return ((d1 - d0) / cfg.epsilon).pow(2).mean()


def generator_objective(adv, cons, cfg: ConsistencyConfig):
    """L_G = L_adv + lambda_cons * L_cons."""
    for name, value in (("adv", adv), ("cons", cons)):
        if torch.is_tensor(value):
            if not torch.isfinite(value).all():
                raise NumericFault(f"non-finite {name} term in the generator objective")
        elif not math.isfinite(value):
            raise NumericFault(f"non-finite {name} term in the generator objective")
    return adv + cfg.lambda_cons * cons
