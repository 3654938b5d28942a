"""Conditional score composition: density tilt by lambda plus weighted class guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .models import NumericError, ScoreEstimate, clean_adj
from .sde import DomainError, mask_x

GRAD_FLOOR = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 0.0
    target_class: int = 0
    r1: float = 0.5
    r2: float = 0.5
    alpha_cap: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise DomainError(f"lambda must lie in [0, 1), got {self.lam}")
        if self.r1 < 0 or self.r2 < 0:
            raise ValueError("r1 and r2 must be nonnegative")
        if self.alpha_cap <= 0:
            raise ValueError("alpha_cap must be positive")


def ood_tilt(lam: float) -> float:
    """Score multiplier 1 - sqrt(lambda) of the tilted density p^(1 - sqrt(lambda))."""
    if not 0.0 <= lam < 1.0:
        raise DomainError(f"lambda must lie in [0, 1), got {lam}")
    return 1.0 - math.sqrt(lam)


def _norm_x(v: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    return torch.linalg.vector_norm(mask_x(v, mask).flatten(1), dim=1)


def _norm_a(v: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is not None:
        m = mask.to(v.dtype)
        v = v * (m[:, :, None] * m[:, None, :])[..., None]
    return torch.linalg.vector_norm(v.flatten(1), dim=1)


def _ratio(num: torch.Tensor, den: torch.Tensor, r: float, decay, cap: float) -> torch.Tensor:
    small = den < GRAD_FLOOR
    alpha = decay * r * num / torch.where(small, torch.ones_like(den), den)
    return torch.where(small, torch.full_like(alpha, cap), alpha)


def alpha_weights(se: ScoreEstimate, grads, r1: float, r2: float, t, alpha_cap: float = 10.0,
                  mask: Optional[torch.Tensor] = None):
    """Per-sample (alpha1, alpha2) = 0.1^t * r * ||score|| / ||grad|| over unmasked entries.

    A gradient norm under 1e-12 yields ``alpha_cap``.
    """
    gx, ga = grads
    if not isinstance(t, torch.Tensor):
        t = torch.tensor(float(t), dtype=se.score_x.dtype)
    decay = torch.pow(torch.tensor(0.1, dtype=se.score_x.dtype), t)
    a1 = _ratio(_norm_x(se.score_x, mask), _norm_x(gx, mask), r1, decay, alpha_cap)
    a2 = _ratio(_norm_a(se.score_a, mask), _norm_a(ga, mask), r2, decay, alpha_cap)
    return a1, a2


def _finite(*ts):
    return all(bool(torch.isfinite(t).all()) for t in ts)


def _compose(se, grads, alphas, coef_fn, mask):
    gx, ga = grads
    a1, a2 = alphas
    a1 = torch.as_tensor(a1, dtype=se.score_x.dtype).reshape(-1, 1, 1)
    a2 = torch.as_tensor(a2, dtype=se.score_a.dtype).reshape(-1, 1, 1, 1)
    out_x = coef_fn(se.score_x, a1 * gx)
    out_a = coef_fn(se.score_a, a2 * ga)
    if mask is not None:
        out_x = mask_x(out_x, mask)
        out_a = clean_adj(out_a, mask)
    return ScoreEstimate(out_x, out_a)


def guided_score(se: ScoreEstimate, grads, cfg: GuidanceConfig, t, mask=None,
                 alphas=None) -> ScoreEstimate:
    """(1 - sqrt(lambda)) * (score + alpha * grad), per component."""
    if not _finite(se.score_x, se.score_a, *grads):
        raise NumericError("non-finite score or classifier gradient")
    if alphas is None:
        alphas = alpha_weights(se, grads, cfg.r1, cfg.r2, t, cfg.alpha_cap, mask)
    c = ood_tilt(cfg.lam)
    return _compose(se, grads, alphas, lambda s, g: c * (s + g), mask)


def guided_score_three_term(se: ScoreEstimate, grads, cfg: GuidanceConfig, t, mask=None,
                            alphas=None) -> ScoreEstimate:
    """Same quantity assembled as unconditional score + class term + exploration term.

    The exploration term is the gradient of -sqrt(lambda) * log p(G, y), i.e.
    -sqrt(lambda) * (score + alpha * grad). Kept as an independent route for checks.
    """
    if alphas is None:
        alphas = alpha_weights(se, grads, cfg.r1, cfg.r2, t, cfg.alpha_cap, mask)
    root = math.sqrt(cfg.lam)
    return _compose(se, grads, alphas, lambda s, g: s + g + (-root) * (s + g), mask)
