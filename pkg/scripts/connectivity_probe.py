"""Component structure of augmented sets in a run directory (isolated nodes, extra components)."""
import argparse
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from oodaug.graph import read_dataset


def components(ds):
    rows = []
    for g in ds:
        n = g.num_nodes
        adj = g.adjacency[:n, :n].any(axis=2)
        k, _ = connected_components(adj, directed=False)
        rows.append((k, int((adj.sum(1) == 0).sum()), adj.sum() / 2 / max(n, 1)))
    return np.array(rows)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    args = ap.parse_args()
    files = [args.run_dir / "data/train.graphs.jsonl"] + sorted((args.run_dir / "augmented").glob("*.graphs.jsonl"))
    for path in files:
        s = components(read_dataset(path))
        print(f"{path.name:40s} connected {np.mean(s[:, 0] == 1):.2f}  components {s[:, 0].mean():.2f}  "
              f"isolated/graph {s[:, 1].mean():.2f}  edges/node {s[:, 2].mean():.2f}")
