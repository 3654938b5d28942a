"""VP and VE forward processes with closed-form Gaussian perturbation kernels.

Time runs over [0, T] with T = 1. For VE the ``beta_min``/``beta_max`` fields
hold sigma_min/sigma_max.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch

Time = Union[float, torch.Tensor]


class DomainError(ValueError):
    pass


def _check_time(t: Time, T: float) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = float(t.min()), float(t.max())
    else:
        lo = hi = float(t)
    if lo < 0.0 or hi > T or math.isnan(lo) or math.isnan(hi):
        raise DomainError(f"t must lie in [0, {T}], got range [{lo}, {hi}]")


def _bcast(v: Time, like: torch.Tensor) -> Time:
    """Reshape a per-batch time-like tensor to broadcast against ``like``."""
    if isinstance(v, torch.Tensor) and v.ndim == 1 and like.ndim > 1:
        return v.reshape(-1, *([1] * (like.ndim - 1)))
    return v


def sym_noise(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Standard normal (..., n, n, b) noise, symmetric per channel with zero diagonal.

    Off-diagonal entries keep unit variance: (z + z^T) / sqrt(2).
    """
    z = torch.randn(shape, generator=generator, dtype=dtype)
    z = (z + z.transpose(-3, -2)) / math.sqrt(2.0)
    n = shape[-2]
    eye = torch.eye(n, dtype=torch.bool).unsqueeze(-1)
    return z.masked_fill(eye, 0.0)


def mask_x(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return x
    return x * mask.unsqueeze(-1).to(x.dtype)


def mask_adj(adj: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return adj
    m = mask.to(adj.dtype)
    return adj * (m.unsqueeze(-1) * m.unsqueeze(-2)).unsqueeze(-1)


@dataclass(frozen=True)
class DiffusionSde:
    kind: str = "VP"
    beta_min: float = 0.1
    beta_max: float = 1.0
    num_steps: int = 1000
    eps_time: float = 1e-3
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in ("VP", "VE"):
            raise ValueError(f"kind must be VP or VE, got {self.kind!r}")
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError(f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0 < self.eps_time < self.T:
            raise ValueError(f"eps_time must lie in (0, T), got {self.eps_time}")

    # schedule pieces
    def beta(self, t: Time) -> Time:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def int_beta(self, t: Time) -> Time:
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def sigma(self, t: Time) -> Time:
        return self.beta_min * (self.beta_max / self.beta_min) ** t

    def drift_diffusion(self, state: torch.Tensor, t: Time):
        """Forward drift f(state, t) and scalar (or per-batch) diffusion g(t)."""
        _check_time(t, self.T)
        if self.kind == "VP":
            b = self.beta(t)
            f = -0.5 * _bcast(b, state) * state
            g = b ** 0.5 if not isinstance(b, torch.Tensor) else torch.sqrt(b)
            return f, g
        s = self.sigma(t)
        g = s * math.sqrt(2.0 * math.log(self.beta_max / self.beta_min))
        return torch.zeros_like(state), g

    def marginal_params(self, t: Time):
        """(mean_coef, std) of the kernel p(x_t | x_0) = N(mean_coef * x_0, std^2)."""
        _check_time(t, self.T)
        tensor = isinstance(t, torch.Tensor)
        exp, sqrt = (torch.exp, torch.sqrt) if tensor else (math.exp, math.sqrt)
        if self.kind == "VP":
            ib = self.int_beta(t)
            return exp(-0.5 * ib), sqrt(1.0 - exp(-ib))
        ratio = self.beta_max / self.beta_min
        mean = torch.ones_like(t) if tensor else 1.0
        return mean, self.beta_min * sqrt(ratio ** (2 * t) - 1.0)

    def prior_std(self) -> float:
        if self.kind == "VP":
            return 1.0
        return math.sqrt(self.beta_max ** 2 - self.beta_min ** 2)

    def noise_like(self, clean: torch.Tensor, adjacency: bool, mask=None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if adjacency:
            z = sym_noise(clean.shape, generator, clean.dtype)
            return mask_adj(z, mask)
        z = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
        return mask_x(z, mask)

    def perturb(self, clean: torch.Tensor, t: Time, generator: Optional[torch.Generator] = None,
                adjacency: bool = False, mask: Optional[torch.Tensor] = None):
        """Draw x_t ~ p(x_t | x_0); returns (noisy, z) with noisy = mean*clean + std*z."""
        mean, std = self.marginal_params(t)
        z = self.noise_like(clean, adjacency, mask, generator)
        noisy = _bcast(mean, clean) * clean + _bcast(std, clean) * z
        return noisy, z

    def prior_sample(self, shape, mask: Optional[torch.Tensor] = None,
                     generator: Optional[torch.Generator] = None, adjacency: bool = False,
                     dtype=torch.float32) -> torch.Tensor:
        if adjacency:
            z = sym_noise(shape, generator, dtype)
            z = mask_adj(z, mask)
        else:
            z = mask_x(torch.randn(shape, generator=generator, dtype=dtype), mask)
        return z * self.prior_std()

    def discretize(self, state: torch.Tensor, t: Time, dt: float):
        """Ancestral-style one-step (f, G) moving from t to t - dt."""
        if self.kind == "VP":
            beta_k = _bcast(self.beta(t) * dt, state)
            sq = torch.sqrt(1.0 - beta_k) if isinstance(beta_k, torch.Tensor) else math.sqrt(1.0 - beta_k)
            f = sq * state - state
            G = beta_k ** 0.5 if not isinstance(beta_k, torch.Tensor) else torch.sqrt(beta_k)
            return f, G
        s_now, s_prev = self.sigma(t), self.sigma(t - dt)
        var = s_now ** 2 - s_prev ** 2
        G = _bcast(var ** 0.5 if not isinstance(var, torch.Tensor) else torch.sqrt(var), state)
        return torch.zeros_like(state), G
