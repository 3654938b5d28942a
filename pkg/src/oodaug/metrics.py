"""Distribution distance (random-GIN MMD), pattern preservation and validity."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .graph import DenseGraph, is_connected, validate

log = logging.getLogger(__name__)


@dataclass
class RandomGinConfig:
    layers: int = 3
    hidden: int = 64
    num_seeds: int = 10
    seeds: Optional[Sequence[int]] = None
    eps: float = 0.0
    distance: str = "emd"  # or "l2"

    def __post_init__(self):
        if self.layers < 1 or self.num_seeds < 1:
            raise ValueError("layers and num_seeds must be >= 1")
        if self.distance not in ("emd", "l2"):
            raise ValueError(f"distance must be emd or l2, got {self.distance!r}")
        if self.seeds is None:
            self.seeds = list(range(self.num_seeds))
        self.seeds = [int(s) for s in self.seeds]
        self.num_seeds = len(self.seeds)


def _stack(graphs: Sequence[DenseGraph]):
    n_max = max(g.n_max for g in graphs)
    gs = [g.padded(n_max) for g in graphs]
    x = np.stack([g.node_features for g in gs]).astype(np.float64)
    adj = np.stack([g.adjacency.sum(axis=2) for g in gs]).astype(np.float64)
    mask = np.stack([g.node_mask for g in gs]).astype(np.float64)
    return x, adj, mask


def _gin_params(in_dim: int, cfg: RandomGinConfig, seed: int):
    rng = np.random.default_rng([seed, in_dim, cfg.layers, cfg.hidden])
    params = []
    d = in_dim
    for _ in range(cfg.layers):
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.hidden))
        b1 = rng.normal(0.0, 0.1, cfg.hidden)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, cfg.hidden))
        b2 = rng.normal(0.0, 0.1, cfg.hidden)
        params.append((w1, b1, w2, b2))
        d = cfg.hidden
    return params


def random_gin_embed(graphs: Sequence[DenseGraph], cfg: RandomGinConfig, seed_index: int) -> np.ndarray:
    """Untrained GIN with fixed random weights; per-layer sum pools, concatenated."""
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, cfg.layers * cfg.hidden))
    x, adj, mask = _stack(graphs)
    params = _gin_params(x.shape[-1], cfg, cfg.seeds[seed_index])
    h = x * mask[..., None]
    pools = []
    for w1, b1, w2, b2 in params:
        agg = (1.0 + cfg.eps) * h + adj @ h
        h = np.maximum(agg @ w1 + b1, 0.0) @ w2 + b2
        h = h * mask[..., None]
        pools.append(h.sum(axis=1))
    return np.concatenate(pools, axis=1)


def _emd_prepare(u: np.ndarray):
    D = u.shape[-1]
    return np.cumsum(u, axis=-1), u.sum(axis=-1), u.min(axis=-1), np.arange(1, D + 1, dtype=np.float64)


def emd_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1-D earth mover's distance between two vectors read as histograms over coordinates.

    Both are shifted by their joint minimum, normalized to unit mass (a zero-mass
    vector becomes uniform) and compared by L1 distance of cumulative sums.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    return float(pairwise_emd(u[None], v[None])[0, 0])


def _normalized_cdf(c, s, m, k, D):
    mass = s - m * D
    zero = np.abs(mass) < 1e-12
    safe = np.where(zero, 1.0, mass)
    cdf = (c - m[..., None] * k) / safe[..., None]
    return np.where(zero[..., None], k / D, cdf)


def pairwise_emd(P: np.ndarray, Q: np.ndarray, chunk: int = 64) -> np.ndarray:
    cp, sp, mp, k = _emd_prepare(P)
    cq, sq, mq, _ = _emd_prepare(Q)
    D = P.shape[1]
    out = np.empty((len(P), len(Q)))
    for s in range(0, len(P), chunk):
        m = np.minimum(mp[s:s + chunk, None], mq[None, :])  # pair-specific shift
        fu = _normalized_cdf(cp[s:s + chunk, None, :], sp[s:s + chunk, None], m, k, D)
        fv = _normalized_cdf(cq[None, :, :], sq[None, :], m, k, D)
        out[s:s + chunk] = np.abs(fu - fv).sum(axis=-1)
    return out


def pairwise_l2(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    d2 = (P * P).sum(1)[:, None] + (Q * Q).sum(1)[None] - 2 * P @ Q.T
    return np.sqrt(np.maximum(d2, 0.0))


class MmdResult(NamedTuple):
    mean: float
    stderr: float
    values: tuple
    biased: bool


def mmd_squared(K: np.ndarray, n_p: int, unbiased: bool = True) -> float:
    kpp, kqq, kpq = K[:n_p, :n_p], K[n_p:, n_p:], K[:n_p, n_p:]
    n_q = K.shape[0] - n_p
    if unbiased:
        e_pp = (kpp.sum() - np.trace(kpp)) / (n_p * (n_p - 1))
        e_qq = (kqq.sum() - np.trace(kqq)) / (n_q * (n_q - 1))
    else:
        e_pp, e_qq = kpp.mean(), kqq.mean()
    return float(e_pp + e_qq - 2 * kpq.mean())


def median_sigma(dist: np.ndarray) -> float:
    off = dist[~np.eye(len(dist), dtype=bool)]
    sigma = float(np.median(off)) if off.size else 1.0
    return sigma if sigma > 0 else 1.0


def mmd_rbf(P_graphs, Q_graphs, cfg: RandomGinConfig = None, sigma: Optional[float] = None) -> MmdResult:
    """MMD between random-GIN embedding sets with k = exp(-d / (2 sigma^2)).

    ``sigma=None`` uses the median of the pooled pairwise distances, per seed.
    Singleton sets fall back to the biased estimator (flagged in the result).
    """
    cfg = cfg or RandomGinConfig()
    P_graphs, Q_graphs = list(P_graphs), list(Q_graphs)
    if not P_graphs or not Q_graphs:
        raise ValueError("mmd_rbf needs two nonempty graph sets")
    unbiased = len(P_graphs) > 1 and len(Q_graphs) > 1
    if not unbiased:
        warnings.warn("singleton set: using the biased MMD estimator", stacklevel=2)
    n_max = max(g.n_max for g in P_graphs + Q_graphs)
    allg = [g.padded(n_max) for g in P_graphs + Q_graphs]
    vals = []
    for k in range(cfg.num_seeds):
        emb = random_gin_embed(allg, cfg, k)
        dist = pairwise_emd(emb, emb) if cfg.distance == "emd" else pairwise_l2(emb, emb)
        s = sigma if sigma is not None else median_sigma(dist)
        K = np.exp(-dist / (2.0 * s * s))
        vals.append(np.sqrt(max(mmd_squared(K, len(P_graphs), unbiased), 0.0)))
    vals = np.array(vals)
    stderr = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return MmdResult(float(vals.mean()), stderr, tuple(float(v) for v in vals), not unbiased)


def preservation_score(phi, augmented, t: Optional[float] = None) -> float:
    """Mean classifier probability of each graph's own target class, at t = eps_time."""
    from .models import predict_proba

    graphs = list(augmented)
    if not graphs:
        raise ValueError("preservation_score of an empty dataset is undefined")
    labels = np.array([-1 if g.label is None else g.label for g in graphs])
    if (labels < 0).any():
        raise ValueError(f"graph {int(np.flatnonzero(labels < 0)[0])} has no target class")
    n_max = phi.n_max
    graphs = [g.padded(n_max) for g in graphs]
    probs = predict_proba(phi, graphs, 1e-3 if t is None else t)
    return float(probs[np.arange(len(graphs)), labels].mean())


def passes_validate(g: DenseGraph) -> bool:
    return not validate(g, discrete=True)


def max_degree_le(bound: int) -> Callable[[DenseGraph], bool]:
    def pred(g: DenseGraph) -> bool:
        deg = np.any(g.adjacency != 0, axis=2).sum(axis=1)
        return bool(deg.max(initial=0) <= bound)
    return pred


PREDICATES = {"valid": passes_validate, "connected": is_connected}


def validity_fraction(graphs, predicate: Callable[[DenseGraph], bool] = passes_validate) -> float:
    graphs = list(graphs)
    if not graphs:
        warnings.warn("validity of an empty set taken as 1.0", stacklevel=2)
        return 1.0
    return float(np.mean([bool(predicate(g)) for g in graphs]))


REPORT_COLUMNS = ("lambda", "mmd_mean", "mmd_stderr", "preservation", "validity", "connected")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    downstream: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, lam, mmd: MmdResult, preservation, validity, connected):
        self.rows.append({"lambda": float(lam), "mmd_mean": mmd.mean, "mmd_stderr": mmd.stderr,
                          "preservation": float(preservation), "validity": float(validity),
                          "connected": float(connected)})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        _write_rows(path, REPORT_COLUMNS, self.rows)

    def write_downstream_csv(self, path) -> None:
        _write_rows(path, ("mode", "seed", "val_acc", "test_acc"), self.downstream)

    def write_svg(self, path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        lam, mean, err = self.column("lambda"), self.column("mmd_mean"), self.column("mmd_stderr")
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(lam, mean, yerr=err, marker="o", capsize=3)
        ax.set_xlabel("lambda")
        ax.set_ylabel("MMD RBF (train vs augmented)")
        ax.set_title("error bars: random-GIN seed spread", fontsize=8)
        fig.tight_layout()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        plt.rcParams["svg.hashsalt"] = "oodaug"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _write_rows(path, columns, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
