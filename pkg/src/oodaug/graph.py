"""Dense padded graph container, invariant checks and the ``.graphs.jsonl`` format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32
SPLIT_TAGS = ("train", "val", "test", "augmented")
FORMAT_NAME = "oodaug-graphs"
FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    """Malformed dataset file."""


class ShapeError(ValueError):
    """Array dimensions disagree with the declared schema."""


@dataclass(frozen=True, eq=False)
class DenseGraph:
    node_features: np.ndarray  # (n_max, a)
    adjacency: np.ndarray  # (n_max, n_max, b)
    node_mask: np.ndarray  # (n_max,) bool
    label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.node_features, dtype=DTYPE)
        adj = np.asarray(self.adjacency, dtype=DTYPE)
        mask = np.asarray(self.node_mask, dtype=bool)
        if adj.ndim == 2:
            adj = adj[:, :, None]
        if x.ndim != 2 or adj.ndim != 3 or mask.ndim != 1:
            raise ShapeError(f"bad ranks: X{x.shape} A{adj.shape} mask{mask.shape}")
        n = mask.shape[0]
        if x.shape[0] != n or adj.shape[:2] != (n, n):
            raise ShapeError(f"inconsistent n_max: X{x.shape} A{adj.shape} mask{mask.shape}")
        for arr in (x, adj, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "node_mask", mask)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n_max(self) -> int:
        return self.node_mask.shape[0]

    @property
    def a(self) -> int:
        return self.node_features.shape[1]

    @property
    def b(self) -> int:
        return self.adjacency.shape[2]

    @property
    def num_nodes(self) -> int:
        return int(self.node_mask.sum())

    def num_edges(self) -> int:
        """Undirected node pairs with any nonzero channel."""
        nz = np.any(self.adjacency != 0, axis=2)
        return int(np.triu(nz, k=1).sum())

    def replace(self, **changes) -> "DenseGraph":
        kw = dict(node_features=self.node_features, adjacency=self.adjacency,
                  node_mask=self.node_mask, label=self.label, meta=dict(self.meta))
        kw.update(changes)
        return DenseGraph(**kw)

    def padded(self, n_max: int) -> "DenseGraph":
        """Same graph padded (or trimmed of padding) to ``n_max`` slots."""
        n = self.n_max
        if n_max < n:
            if self.node_mask[n_max:].any():
                raise ShapeError(f"cannot trim to {n_max}: active nodes beyond it")
            return self.replace(node_features=self.node_features[:n_max],
                                adjacency=self.adjacency[:n_max, :n_max],
                                node_mask=self.node_mask[:n_max])
        x = np.zeros((n_max, self.a), DTYPE)
        adj = np.zeros((n_max, n_max, self.b), DTYPE)
        mask = np.zeros(n_max, bool)
        x[:n] = self.node_features
        adj[:n, :n] = self.adjacency
        mask[:n] = self.node_mask
        return self.replace(node_features=x, adjacency=adj, node_mask=mask)

    def equals(self, other: "DenseGraph") -> bool:
        return (
            self.label == other.label
            and np.array_equal(self.node_mask, other.node_mask)
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.adjacency, other.adjacency)
            and self.meta == other.meta
        )


def from_edges(n_max: int, edges: Iterable[tuple[int, int]], node_features: np.ndarray,
               label: Optional[int] = None, meta: Optional[dict] = None) -> DenseGraph:
    """Build a single-channel graph whose first ``len(node_features)`` slots are active."""
    feats = np.asarray(node_features, DTYPE)
    n = feats.shape[0]
    if n > n_max:
        raise ShapeError(f"{n} nodes exceed n_max={n_max}")
    x = np.zeros((n_max, feats.shape[1]), DTYPE)
    x[:n] = feats
    adj = np.zeros((n_max, n_max, 1), DTYPE)
    for i, j in edges:
        adj[i, j, 0] = adj[j, i, 0] = 1.0
    mask = np.zeros(n_max, bool)
    mask[:n] = True
    return DenseGraph(x, adj, mask, label, dict(meta or {}))


def sym(adj: np.ndarray) -> np.ndarray:
    """Per-channel symmetrization (A + A^T) / 2; works on (n, n, b) or batched (..., n, n, b)."""
    return (adj + np.swapaxes(adj, -3, -2)) / 2


def validate(g: DenseGraph, discrete: bool = False) -> list[str]:
    """List invariant violations, each naming the first offending index. Empty means valid."""
    out = []
    x, adj, mask = g.node_features, g.adjacency, g.node_mask
    asym = np.argwhere(adj != np.swapaxes(adj, 0, 1))
    if len(asym):
        i, j, c = asym[0]
        out.append(f"asymmetry at ({i},{j},{c})")
    diag = np.argwhere(np.diagonal(adj, axis1=0, axis2=1).T != 0)
    if len(diag):
        i, c = diag[0]
        out.append(f"nonzero diagonal at ({i},{i},{c})")
    off = ~mask
    rows = np.flatnonzero(off & np.any(x != 0, axis=1))
    if len(rows):
        out.append(f"masked row nonzero at {rows[0]}")
    pad = np.flatnonzero(off & (np.any(adj != 0, axis=(1, 2)) | np.any(adj != 0, axis=(0, 2))))
    if len(pad):
        out.append(f"masked adjacency nonzero at {pad[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(adj))):
        out.append("non-finite entries")
    if discrete:
        bad_x = np.argwhere((x != 0) & (x != 1))
        if len(bad_x):
            out.append(f"non-binary feature at ({bad_x[0][0]},{bad_x[0][1]})")
        bad_a = np.argwhere((adj != 0) & (adj != 1))
        if len(bad_a):
            i, j, c = bad_a[0]
            out.append(f"non-binary adjacency at ({i},{j},{c})")
    if g.label is not None and g.label < 0:
        out.append(f"negative label {g.label}")
    return out


def is_connected(g: DenseGraph) -> bool:
    """BFS over active nodes; an empty graph counts as connected."""
    active = np.flatnonzero(g.node_mask)
    if len(active) == 0:
        return True
    nbrs = np.any(g.adjacency != 0, axis=2)
    seen = {int(active[0])}
    frontier = [int(active[0])]
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(nbrs[i]):
            if j not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return len(seen) == len(active)


@dataclass(eq=False)
class GraphDataset:
    graphs: list[DenseGraph]
    num_classes: int
    split_tag: str = "train"
    n_max: Optional[int] = None
    a: Optional[int] = None
    b: Optional[int] = None
    feature_blocks: Optional[tuple[int, ...]] = None  # one-hot block widths of X
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        self.graphs = list(self.graphs)
        if self.graphs:
            g0 = self.graphs[0]
            self.n_max = self.n_max or g0.n_max
            self.a = self.a or g0.a
            self.b = self.b or g0.b
        if self.n_max is None or self.a is None or self.b is None:
            raise ShapeError("empty dataset needs explicit n_max, a, b")
        for k, g in enumerate(self.graphs):
            if (g.n_max, g.a, g.b) != (self.n_max, self.a, self.b):
                raise ShapeError(f"graph {k} has dims {(g.n_max, g.a, g.b)}, "
                                 f"dataset has {(self.n_max, self.a, self.b)}")
            if g.label is not None and g.label >= self.num_classes:
                raise ValueError(f"graph {k} label {g.label} >= num_classes {self.num_classes}")
        if self.feature_blocks is None:
            self.feature_blocks = (self.a,)
        self.feature_blocks = tuple(int(w) for w in self.feature_blocks)
        if sum(self.feature_blocks) != self.a:
            raise ShapeError(f"feature blocks {self.feature_blocks} do not sum to a={self.a}")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, k):
        return self.graphs[k]

    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs], dtype=np.int64)

    def node_counts(self) -> np.ndarray:
        return np.array([g.num_nodes for g in self.graphs], dtype=np.int64)

    def with_graphs(self, graphs: Sequence[DenseGraph], split_tag: Optional[str] = None,
                    meta: Optional[dict] = None) -> "GraphDataset":
        return GraphDataset(list(graphs), self.num_classes, split_tag or self.split_tag,
                            self.n_max, self.a, self.b, self.feature_blocks,
                            dict(self.meta if meta is None else meta))

    def padded(self, n_max: int) -> "GraphDataset":
        return GraphDataset([g.padded(n_max) for g in self.graphs], self.num_classes,
                            self.split_tag, n_max, self.a, self.b, self.feature_blocks,
                            dict(self.meta))

    def equals(self, other: "GraphDataset") -> bool:
        head = (self.num_classes, self.split_tag, self.n_max, self.a, self.b,
                self.feature_blocks, self.meta)
        ohead = (other.num_classes, other.split_tag, other.n_max, other.a, other.b,
                 other.feature_blocks, other.meta)
        return head == ohead and len(self) == len(other) and all(
            g.equals(h) for g, h in zip(self.graphs, other.graphs))


def concat(datasets: Sequence[GraphDataset], split_tag: str = "train") -> GraphDataset:
    """Union of datasets with a common feature schema, padded to the largest n_max."""
    n_max = max(d.n_max for d in datasets)
    graphs = [g.padded(n_max) for d in datasets for g in d.graphs]
    d0 = datasets[0]
    return GraphDataset(graphs, max(d.num_classes for d in datasets), split_tag, n_max,
                        d0.a, d0.b, d0.feature_blocks)


# --- serialization -------------------------------------------------------------------

def _num(v: float) -> float:
    # 9 significant digits round-trips float32 exactly
    return float(f"{float(v):.9g}")


def _encode_graph(g: DenseGraph) -> dict:
    n = g.num_nodes
    if not g.node_mask[:n].all():
        raise ShapeError("serialization requires active nodes to occupy the first n slots")
    x = [[_num(v) for v in row] for row in g.node_features[:n]]
    edges = []
    adj = g.adjacency
    nz = np.any(adj[:n, :n] != 0, axis=2)
    for i, j in zip(*np.nonzero(np.triu(nz, k=1))):
        edges.append([int(i), int(j), [_num(v) for v in adj[i, j]]])
    rec = {"n": n, "x": x, "edges": edges, "label": g.label}
    if g.meta:
        rec["meta"] = g.meta
    return rec


def write_dataset(ds: GraphDataset, path) -> None:
    """One JSON header line, then one JSON record per graph."""
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION,
        "n_max": ds.n_max, "a": ds.a, "b": ds.b, "M": ds.num_classes,
        "split_tag": ds.split_tag, "feature_blocks": list(ds.feature_blocks),
        "count": len(ds), "meta": ds.meta,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for g in ds.graphs:
            fh.write(json.dumps(_encode_graph(g), sort_keys=True) + "\n")


def _decode_graph(rec: dict, n_max: int, a: int, b: int, lineno: int) -> DenseGraph:
    try:
        n = int(rec["n"])
        xs = rec["x"]
        edges = rec["edges"]
        label = rec.get("label")
    except (KeyError, TypeError, ValueError) as err:
        raise GraphFormatError(f"line {lineno}: malformed record ({err})") from None
    if n > n_max or len(xs) != n:
        raise ShapeError(f"line {lineno}: n={n} with {len(xs)} feature rows, n_max={n_max}")
    x = np.zeros((n_max, a), DTYPE)
    if n:
        xa = np.asarray(xs, dtype=np.float64)
        if xa.shape != (n, a):
            raise ShapeError(f"line {lineno}: x has shape {xa.shape}, expected {(n, a)}")
        x[:n] = xa
    adj = np.zeros((n_max, n_max, b), DTYPE)
    for e in edges:
        i, j, ch = int(e[0]), int(e[1]), e[2]
        if not (0 <= i < n and 0 <= j < n) or len(ch) != b:
            raise ShapeError(f"line {lineno}: edge {e[:2]} with {len(ch)} channels out of range")
        adj[i, j] = adj[j, i] = np.asarray(ch, dtype=np.float64)
    mask = np.zeros(n_max, bool)
    mask[:n] = True
    return DenseGraph(x, adj, mask, label, dict(rec.get("meta", {})))


def read_dataset(path) -> GraphDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise GraphFormatError(f"{path}: empty file, no header")
    recs: list[Any] = []
    for k, line in enumerate(lines, start=1):
        try:
            recs.append(json.loads(line))
        except json.JSONDecodeError as err:
            raise GraphFormatError(
                f"{path}: line {k}: parse error ({err.msg}); last complete line is {k - 1}"
            ) from None
    header = recs[0]
    try:
        n_max, a, b = int(header["n_max"]), int(header["a"]), int(header["b"])
        num_classes, split = int(header["M"]), header["split_tag"]
    except (KeyError, TypeError, ValueError) as err:
        raise GraphFormatError(f"{path}: line 1: malformed header ({err})") from None
    graphs = [_decode_graph(r, n_max, a, b, k) for k, r in enumerate(recs[1:], start=2)]
    if "count" in header and int(header["count"]) != len(graphs):
        raise GraphFormatError(f"{path}: header declares {header['count']} graphs, "
                               f"found {len(graphs)}; last complete line is {len(lines)}")
    return GraphDataset(graphs, num_classes, split, n_max, a, b,
                        tuple(header.get("feature_blocks") or (a,)), dict(header.get("meta", {})))
