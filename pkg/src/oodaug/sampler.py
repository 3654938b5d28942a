"""Reverse-time integration of the coupled X / A system with guided scores."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .graph import DenseGraph, GraphDataset
from .guidance import GuidanceConfig, guided_score
from .models import GraphClassifier, NumericError, ScoreEstimate, class_logprob_grad, clean_adj
from .sde import DiffusionSde, mask_x

log = logging.getLogger(__name__)

SOLVERS = ("euler_maruyama", "em_langevin", "reverse_diffusion")

ScoreFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], ScoreEstimate]


class SamplerDivergence(FloatingPointError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class SamplerConfig:
    solver: str = "em_langevin"
    snr: float = 0.2
    scale_coeff: float = 0.7
    corrector_steps: int = 1
    num_steps: int = 1000
    seed: int = 0
    batch_size: int = 300
    debug: bool = False

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.snr < 0 or not 0 <= self.scale_coeff <= 1:
            raise ValueError("need snr >= 0 and scale_coeff in [0, 1]")
        if self.num_steps < 1 or self.corrector_steps < 0:
            raise ValueError("num_steps must be >= 1 and corrector_steps >= 0")


@dataclass
class AugmentRequest:
    lambdas: Sequence[float] = (0.0,)
    per_class: int = 100
    node_counts: Optional[tuple] = None  # (lo, hi) override; default resamples train counts
    r1: float = 0.5
    r2: float = 0.5
    alpha_cap: float = 10.0

    def __post_init__(self):
        if self.per_class < 0:
            raise ValueError("per_class must be >= 0")
        for lam in self.lambdas:
            if not 0 <= lam < 1:
                raise ValueError(f"lambda {lam} outside [0, 1)")


class GaussianScore:
    """Exact score of p_t when every active X entry and every off-diagonal A entry is
    i.i.d. N(mean, std^2) at t = 0. Stands in for a trained network in solver checks."""

    def __init__(self, sde_x: DiffusionSde, sde_a: DiffusionSde, mean_x=0.0, std_x=1.0,
                 mean_a=0.0, std_a=1.0):
        self.sde_x, self.sde_a = sde_x, sde_a
        self.mx, self.sx, self.ma, self.sa = mean_x, std_x, mean_a, std_a

    @staticmethod
    def _score(sde, v, t, mu, sigma):
        m, s = sde.marginal_params(t)
        shape = (-1,) + (1,) * (v.ndim - 1)
        m, s = m.reshape(shape), s.reshape(shape)
        return -(v - m * mu) / (m * m * sigma * sigma + s * s)

    def __call__(self, x, adj, mask, t) -> ScoreEstimate:
        sx = mask_x(self._score(self.sde_x, x, t, self.mx, self.sx), mask)
        sa = clean_adj(self._score(self.sde_a, adj, t, self.ma, self.sa), mask)
        return ScoreEstimate(sx, sa)


def node_mask(n_nodes: Sequence[int], n_max: int) -> torch.Tensor:
    n = torch.as_tensor(list(n_nodes)).reshape(-1, 1)
    if int(n.max()) > n_max:
        raise ValueError(f"requested {int(n.max())} nodes but n_max is {n_max}")
    return torch.arange(n_max)[None, :] < n


def _per_sample(v, like):
    if isinstance(v, torch.Tensor) and v.ndim >= 1:
        return v.reshape(-1, *([1] * (like.ndim - 1)))
    return v


def _check_invariants(x, adj, mask, step):
    if not torch.equal(adj, adj.transpose(1, 2)):
        raise InvariantViolation(f"asymmetric adjacency at step {step}")
    if torch.diagonal(adj, dim1=1, dim2=2).abs().max() > 0:
        raise InvariantViolation(f"nonzero adjacency diagonal at step {step}")
    off = ~mask
    if (x[off] != 0).any():
        raise InvariantViolation(f"masked node features nonzero at step {step}")
    pair = off[:, :, None] | off[:, None, :]
    if (adj[pair] != 0).any():
        raise InvariantViolation(f"masked adjacency nonzero at step {step}")


class _Guide:
    """Evaluates the guided score for a batch with per-sample target classes."""

    def __init__(self, score_fn, phi, gcfg: GuidanceConfig, targets: torch.Tensor, mask):
        self.score_fn, self.phi, self.gcfg, self.targets, self.mask = score_fn, phi, gcfg, targets, mask
        self.use_classifier = phi is not None and (gcfg.r1 > 0 or gcfg.r2 > 0)

    def __call__(self, x, adj, t_scalar: float) -> ScoreEstimate:
        t = torch.full((x.shape[0],), t_scalar, dtype=x.dtype)
        with torch.no_grad():
            se = self.score_fn(x, adj, self.mask, t)
        if self.use_classifier:
            grads = class_logprob_grad(self.phi, x, adj, self.mask, t, self.targets)
        else:
            grads = (torch.zeros_like(x), torch.zeros_like(adj))
        return guided_score(se, grads, self.gcfg, t, self.mask)


def reverse_sample_batch(score_fn: ScoreFn, phi: Optional[GraphClassifier], sde_x: DiffusionSde,
                         sde_a: DiffusionSde, gcfg: GuidanceConfig, scfg: SamplerConfig,
                         n_nodes: Sequence[int], n_max: int, a: int, b: int,
                         targets: Optional[Sequence[int]] = None,
                         generator: Optional[torch.Generator] = None, trace: Optional[list] = None):
    """Integrate from the prior at t=T down to eps_time; returns (X, A, mask) tensors."""
    gen = generator or torch.Generator().manual_seed(scfg.seed)
    B = len(n_nodes)
    mask = node_mask(n_nodes, n_max)
    if targets is None:
        targets = [gcfg.target_class] * B
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    guide = _Guide(score_fn, phi, gcfg, targets, mask)
    x = sde_x.prior_sample((B, n_max, a), mask, gen)
    adj = sde_a.prior_sample((B, n_max, n_max, b), mask, gen, adjacency=True)
    T, eps, N = sde_x.T, sde_x.eps_time, scfg.num_steps
    dt = (T - eps) / N
    for k in range(N):
        t = T - k * dt
        try:
            se = guide(x, adj, t)
        except NumericError as err:
            raise SamplerDivergence(f"step {k} (t={t:.4f}): {err}") from None
        zx = sde_x.noise_like(x, False, mask, gen)
        za = sde_a.noise_like(adj, True, mask, gen)
        if scfg.solver == "reverse_diffusion":
            fx, gx = sde_x.discretize(x, t, dt)
            fa, ga = sde_a.discretize(adj, t, dt)
            x = x - (fx - _per_sample(gx, x) ** 2 * se.score_x) + _per_sample(gx, x) * zx
            adj = adj - (fa - _per_sample(ga, adj) ** 2 * se.score_a) + _per_sample(ga, adj) * za
        else:
            fx, gx = sde_x.drift_diffusion(x, t)
            fa, ga = sde_a.drift_diffusion(adj, t)
            x = x - (fx - gx ** 2 * se.score_x) * dt + gx * math.sqrt(dt) * zx
            adj = adj - (fa - ga ** 2 * se.score_a) * dt + ga * math.sqrt(dt) * za
        t_next = T - (k + 1) * dt
        if scfg.solver == "em_langevin":
            for _ in range(scfg.corrector_steps):
                try:
                    x, adj = _langevin(guide, x, adj, t_next, mask, scfg, sde_x, sde_a, gen)
                except NumericError as err:
                    raise SamplerDivergence(f"corrector at step {k}: {err}") from None
        if not (torch.isfinite(x).all() and torch.isfinite(adj).all()):
            raise SamplerDivergence(f"non-finite state at step {k} (t={t:.4f})")
        if scfg.debug:
            _check_invariants(x, adj, mask, k)
        if trace is not None:
            trace.append((k, x.clone(), adj.clone()))
    return x, adj, mask


def _langevin(guide, x, adj, t, mask, scfg, sde_x, sde_a, gen):
    se = guide(x, adj, t)
    zx = sde_x.noise_like(x, False, mask, gen)
    za = sde_a.noise_like(adj, True, mask, gen)
    out = []
    for state, grad, z in ((x, se.score_x, zx), (adj, se.score_a, za)):
        gn = torch.linalg.vector_norm(grad.flatten(1), dim=1)
        zn = torch.linalg.vector_norm(z.flatten(1), dim=1)
        step = 2 * scfg.scale_coeff * (scfg.snr * zn / gn.clamp_min(1e-12)) ** 2
        step = _per_sample(step, state)
        out.append(state + step * grad + torch.sqrt(2 * step) * z)
    return out[0], out[1]


def reverse_sample(score_fn, phi, sde_x, sde_a, gcfg: GuidanceConfig, scfg: SamplerConfig,
                   n_nodes: int, rng=None, n_max: Optional[int] = None, a=None, b=None) -> DenseGraph:
    """Draw one continuous graph labeled with ``gcfg.target_class``."""
    n_max = n_max or score_fn.n_max
    a = a or score_fn.a
    b = b or score_fn.b
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(
        scfg.seed if rng is None else int(rng))
    x, adj, mask = reverse_sample_batch(score_fn, phi, sde_x, sde_a, gcfg, scfg, [n_nodes],
                                        n_max, a, b, generator=gen)
    return DenseGraph(x[0].numpy(), adj[0].numpy(), mask[0].numpy(), gcfg.target_class)


def quantize(g: DenseGraph, feature_blocks: Optional[Sequence[int]] = None) -> DenseGraph:
    """Threshold adjacency at 0.5 (OR-symmetrized, no self loops); argmax per feature block."""
    mask = g.node_mask
    adj = (g.adjacency > 0.5)
    adj = adj | np.swapaxes(adj, 0, 1)
    idx = np.arange(g.n_max)
    adj[idx, idx] = False
    adj &= (mask[:, None] & mask[None, :])[..., None]
    blocks = tuple(feature_blocks) if feature_blocks else (g.a,)
    x = np.zeros_like(g.node_features)
    start = 0
    rows = np.flatnonzero(mask)
    for w in blocks:
        block = g.node_features[rows, start:start + w]
        if len(rows):
            x[rows, start + np.argmax(block, axis=1)] = 1.0
        start += w
    return g.replace(node_features=x, adjacency=adj.astype(np.float32))


def _draw_node_counts(train: GraphDataset, req: AugmentRequest, count: int, rng) -> np.ndarray:
    if req.node_counts is not None:
        lo, hi = req.node_counts
        return rng.integers(lo, hi + 1, size=count)
    return rng.choice(train.node_counts(), size=count, replace=True)


def augment_dataset(train: GraphDataset, score_net, phi, req: AugmentRequest, scfg: SamplerConfig,
                    sde_x: Optional[DiffusionSde] = None, sde_a: Optional[DiffusionSde] = None,
                    checkpoint_hash: str = "") -> GraphDataset:
    """Quantized class-balanced samples for every lambda in the request.

    Each lambda reuses the same seed, so the sweep shares its random numbers and
    differences across lambda come from the guidance alone.
    """
    sde_x = sde_x or score_net.sde_x
    sde_a = sde_a or score_net.sde_a
    n_max = score_net.n_max
    M = train.num_classes
    graphs = []
    for lam in req.lambdas:
        rng = np.random.default_rng(scfg.seed)
        targets = np.repeat(np.arange(M), req.per_class)
        counts = _draw_node_counts(train, req, len(targets), rng)
        gcfg = GuidanceConfig(float(lam), 0, req.r1, req.r2, req.alpha_cap)
        gen = torch.Generator().manual_seed(scfg.seed)
        for s in range(0, len(targets), scfg.batch_size):
            tb, nb = targets[s:s + scfg.batch_size], counts[s:s + scfg.batch_size]
            x, adj, mask = reverse_sample_batch(score_net, phi, sde_x, sde_a, gcfg, scfg,
                                                nb.tolist(), n_max, train.a, train.b,
                                                targets=tb.tolist(), generator=gen)
            for i in range(len(tb)):
                g = DenseGraph(x[i].numpy(), adj[i].numpy(), mask[i].numpy(), int(tb[i]),
                               {"lambda": float(lam), "target_class": int(tb[i]),
                                "r1": float(req.r1), "r2": float(req.r2), "seed": int(scfg.seed)})
                graphs.append(quantize(g, train.feature_blocks))
        log.info("sampled %d graphs at lambda=%.2f", len(targets), lam)
    meta = {"lambdas": [float(v) for v in req.lambdas], "r1": float(req.r1), "r2": float(req.r2),
            "seed": int(scfg.seed), "checkpoint_hash": checkpoint_hash}
    return GraphDataset(graphs, M, "augmented", n_max, train.a, train.b, train.feature_blocks, meta)
