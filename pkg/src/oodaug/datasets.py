"""Synthetic motif graphs with base, size and color covariate splits.

Every graph is a base component ("environment") plus a 5-node motif that alone
determines the label, joined by a single connector edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import DenseGraph, GraphDataset, from_edges

MOTIFS = ("house", "cycle", "crane")
BASES = ("wheel", "tree", "ladder", "star", "path")
NUM_COLORS = 7

MOTIF_EDGES = {
    "house": [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
    "cycle": [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
    "crane": [(0, 1), (1, 2), (2, 0), (1, 3), (2, 4)],
}
MOTIF_SIZE = 5
MIN_BASE_SIZE = 4

BASE_SPLIT = {"train": ("wheel", "tree", "ladder"), "val": ("star",), "test": ("path",)}
SIZE_RANGES = {"train": (6, 45), "val": (20, 75), "test": (68, 155)}
COLOR_SPLIT = {"train": (0, 1, 2, 3, 4), "val": (5,), "test": (6,)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MotifSpec:
    motif_kind: str
    base_kind: str
    base_size: int
    seed: Optional[int] = None

    def __post_init__(self):
        if self.motif_kind not in MOTIFS:
            raise ConfigError(f"unknown motif {self.motif_kind!r}")
        if self.base_kind not in BASES:
            raise ConfigError(f"unknown base {self.base_kind!r}")
        if self.base_size < MIN_BASE_SIZE:
            raise ConfigError(f"{self.base_kind} base needs >= {MIN_BASE_SIZE} nodes, "
                              f"got {self.base_size}")

    @property
    def label(self) -> int:
        return MOTIFS.index(self.motif_kind)


@dataclass
class SplitConfig:
    shift_kind: str = "base"
    sizes: dict = field(default_factory=lambda: {"train": 300, "val": 150, "test": 150})
    base_size_range: tuple = (6, 15)  # base node counts for base/color shift
    size_ranges: dict = field(default_factory=lambda: {k: tuple(v) for k, v in SIZE_RANGES.items()})
    max_degree: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.shift_kind not in ("base", "size", "color"):
            raise ConfigError(f"shift_kind must be base/size/color, got {self.shift_kind!r}")
        for split in ("train", "val", "test"):
            if self.sizes.get(split, 0) < 0:
                raise ConfigError(f"negative size for split {split}")
        lo, hi = self.base_size_range
        if lo < MIN_BASE_SIZE or hi < lo:
            raise ConfigError(f"base_size_range {self.base_size_range} invalid "
                              f"(need {MIN_BASE_SIZE} <= lo <= hi)")
        for split, (lo, hi) in self.size_ranges.items():
            if hi < lo or hi < MOTIF_SIZE + MIN_BASE_SIZE:
                raise ConfigError(f"size range {split}={lo}-{hi} cannot hold a motif "
                                  f"plus a {MIN_BASE_SIZE}-node base")
        if self.max_degree < 1:
            raise ConfigError("max_degree must be >= 1")

    @property
    def degree_dim(self) -> int:
        return self.max_degree + 1


# --- base topologies -----------------------------------------------------------------

def _wheel(n, rng):
    rim = list(range(1, n))
    return [(0, i) for i in rim] + [(rim[k], rim[(k + 1) % len(rim)]) for k in range(len(rim))]


def _tree(n, rng):
    # uniform random recursive tree
    return [(int(rng.integers(0, i)), i) for i in range(1, n)]


def _ladder(n, rng):
    k = n // 2
    edges = [(i, i + k) for i in range(k)]
    edges += [(i, i + 1) for i in range(k - 1)] + [(i + k, i + k + 1) for i in range(k - 1)]
    if n % 2:  # odd count: tail node off the last rung
        edges.append((2 * k - 1, 2 * k))
    return edges


def _star(n, rng):
    return [(0, i) for i in range(1, n)]


def _path(n, rng):
    return [(i, i + 1) for i in range(n - 1)]


BASE_BUILDERS = {"wheel": _wheel, "tree": _tree, "ladder": _ladder, "star": _star, "path": _path}


def degree_onehot(degrees: np.ndarray, max_degree: int) -> np.ndarray:
    out = np.zeros((len(degrees), max_degree + 1), np.float32)
    out[np.arange(len(degrees)), np.minimum(degrees, max_degree)] = 1.0
    return out


def motif_edges(spec: MotifSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Edge list of base (nodes 0..base_size-1), motif (next 5) and one connector."""
    nb = spec.base_size
    edges = list(BASE_BUILDERS[spec.base_kind](nb, rng))
    edges += [(nb + i, nb + j) for i, j in MOTIF_EDGES[spec.motif_kind]]
    edges.append((int(rng.integers(0, nb)), nb))
    return edges


def gen_motif_graph(spec: MotifSpec, rng: np.random.Generator, max_degree: int = 10,
                    n_max: Optional[int] = None, color: Optional[int] = None) -> DenseGraph:
    """Base graph + motif + connector, with one-hot degree (and optional color) features."""
    n = spec.base_size + MOTIF_SIZE
    edges = motif_edges(spec, rng)
    deg = np.zeros(n, np.int64)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    feats = degree_onehot(deg, max_degree)
    meta = {"base_kind": spec.base_kind, "motif_kind": spec.motif_kind}
    if color is not None:
        col = np.zeros((n, NUM_COLORS), np.float32)
        col[:, color] = 1.0
        feats = np.concatenate([feats, col], axis=1)
        meta["color"] = int(color)
    return from_edges(n_max or n, edges, feats, spec.label, meta)


def _balanced_labels(count: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % len(MOTIFS)
    return rng.permutation(labels)


def _split_rng(cfg: SplitConfig, split: str) -> np.random.Generator:
    tag = {"train": 0, "val": 1, "test": 2}[split]
    return np.random.default_rng([cfg.seed, tag, ("base", "size", "color").index(cfg.shift_kind)])


def _draw_specs(cfg: SplitConfig, split: str, rng: np.random.Generator):
    count = cfg.sizes.get(split, 0)
    labels = _balanced_labels(count, rng)
    out = []
    for y in labels:
        if cfg.shift_kind == "base":
            base = BASE_SPLIT[split][int(rng.integers(len(BASE_SPLIT[split])))]
            size = int(rng.integers(cfg.base_size_range[0], cfg.base_size_range[1] + 1))
        elif cfg.shift_kind == "size":
            base = BASES[int(rng.integers(len(BASES)))]
            lo, hi = cfg.size_ranges[split]
            lo = max(lo, MOTIF_SIZE + MIN_BASE_SIZE)
            size = int(rng.integers(lo, hi + 1)) - MOTIF_SIZE
        else:
            base = BASES[int(rng.integers(len(BASES)))]
            size = int(rng.integers(cfg.base_size_range[0], cfg.base_size_range[1] + 1))
        out.append(MotifSpec(MOTIFS[int(y)], base, size))
    return out


def _build_split(cfg: SplitConfig, split: str, colors=None) -> GraphDataset:
    rng = _split_rng(cfg, split)
    specs = _draw_specs(cfg, split, rng)
    color_draws = [None] * len(specs)
    if colors is not None:
        color_draws = [int(colors[int(rng.integers(len(colors)))]) for _ in specs]
    graphs = [gen_motif_graph(s, rng, cfg.max_degree, color=c) for s, c in zip(specs, color_draws)]
    if cfg.shift_kind == "size":
        n_max = cfg.size_ranges[split][1]
    else:
        n_max = cfg.base_size_range[1] + MOTIF_SIZE
    graphs = [g.padded(n_max) for g in graphs]
    blocks = (cfg.degree_dim,) if colors is None else (cfg.degree_dim, NUM_COLORS)
    return GraphDataset(graphs, len(MOTIFS), split, n_max, sum(blocks), 1, blocks,
                        {"shift_kind": cfg.shift_kind, "seed": cfg.seed})


def make_motif_splits(cfg: SplitConfig, rng=None):
    """(train, val, test) under base shift (wheel/tree/ladder vs star vs path) or size shift.

    ``rng`` is accepted for signature symmetry; splits are seeded from ``cfg.seed``
    so each split is reproducible on its own.
    """
    if cfg.shift_kind not in ("base", "size"):
        raise ConfigError(f"make_motif_splits needs base or size shift, got {cfg.shift_kind!r}")
    return tuple(_build_split(cfg, s) for s in ("train", "val", "test"))


def make_color_splits(cfg: SplitConfig, rng=None):
    """(train, val, test) with identical structure law and a graph-wide color per split."""
    if cfg.shift_kind != "color":
        raise ConfigError(f"make_color_splits needs color shift, got {cfg.shift_kind!r}")
    return tuple(_build_split(cfg, s, COLOR_SPLIT[s]) for s in ("train", "val", "test"))


def make_splits(cfg: SplitConfig):
    if cfg.shift_kind == "color":
        return make_color_splits(cfg)
    return make_motif_splits(cfg)
