"""GIN graph classifier trained with or without augmentation, plus the ablation grid."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .graph import GraphDataset, concat

log = logging.getLogger(__name__)

MODES = ("erm", "unconditional", "lambda_only", "alpha_only", "ooda")


class ConfigError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    layers: int = 3
    hidden: int = 64
    dropout: float = 0.5
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    seeds: Sequence[int] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("layers, hidden must be positive and epochs nonnegative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        self.seeds = tuple(int(s) for s in self.seeds)


class GinClassifier(nn.Module):
    """Sum-aggregation GIN, mean pooling over active nodes, ReLU, dropout."""

    def __init__(self, in_dim: int, num_classes: int, cfg: ClassifierConfig):
        super().__init__()
        dims = [in_dim] + [cfg.hidden] * cfg.layers
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Linear(dims[k], cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, cfg.hidden))
            for k in range(cfg.layers))
        self.eps = nn.Parameter(torch.zeros(cfg.layers))
        self.dropout = cfg.dropout
        self.out = nn.Linear(cfg.hidden, num_classes)

    def forward(self, x, adj, mask):
        a = adj.sum(-1)
        mf = mask.to(x.dtype)[..., None]
        h = x * mf
        for k, conv in enumerate(self.convs):
            h = conv((1 + self.eps[k]) * h + a @ h)
            h = F.dropout(F.relu(h), self.dropout, self.training) * mf
        pooled = h.sum(1) / mf.sum(1).clamp_min(1.0)
        return self.out(pooled)


def _tensors(ds: GraphDataset):
    from .models import to_tensors
    return to_tensors(ds.graphs)


@torch.no_grad()
def evaluate(model: GinClassifier, ds: GraphDataset) -> float:
    """Fraction of graphs whose argmax prediction equals the label."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    d = _tensors(ds)
    pred = model(d.x, d.adj, d.mask).argmax(-1)
    return float((pred == d.labels).double().mean())


def train_gnn(train: GraphDataset, cfg: ClassifierConfig, val: Optional[GraphDataset] = None,
              seed: int = 0) -> GinClassifier:
    """Cross-entropy training; keeps the epoch with the best validation accuracy."""
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    if (train.labels() < 0).any():
        raise ValueError("train_gnn needs labeled graphs")
    torch.manual_seed(seed)
    model = GinClassifier(train.a, train.num_classes, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    data = _tensors(train)
    gen = torch.Generator().manual_seed(seed)
    best, best_state = -1.0, copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(data), generator=gen)
        for s in range(0, len(data), cfg.batch_size):
            b = data.index(perm[s:s + cfg.batch_size])
            loss = F.cross_entropy(model(b.x, b.adj, b.mask), b.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
        score = evaluate(model, val) if val is not None and len(val) else -loss.item()
        if score > best:
            best, best_state = score, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    model.best_val = best
    return model


def _audit(mode: str, aug: Optional[GraphDataset]) -> None:
    if mode == "erm":
        return
    if aug is None:
        raise ConfigError(f"mode {mode} needs an augmented dataset")
    lams = aug.meta.get("lambdas", [])
    r_on = aug.meta.get("r1", 0) > 0 or aug.meta.get("r2", 0) > 0
    lam_on = any(v > 0 for v in lams)
    want = {"unconditional": (False, False), "lambda_only": (True, False),
            "alpha_only": (False, True), "ooda": (True, True)}[mode]
    if (lam_on, r_on) != want:
        raise ConfigError(f"mode {mode} expects lambda>0={want[0]}, guidance={want[1]}; "
                          f"augmented set has lambdas={lams}, r1={aug.meta.get('r1')}, "
                          f"r2={aug.meta.get('r2')}")


def training_set(mode: str, train: GraphDataset, aug: Optional[GraphDataset]) -> GraphDataset:
    _audit(mode, aug)
    if mode == "erm":
        return train
    return concat([train, aug], split_tag="train")


def run_comparison(splits, augmented: Optional[GraphDataset], cfg: ClassifierConfig,
                   mode: str) -> list[dict]:
    """One row per seed: mode, seed, val_acc, test_acc."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    train, val, test = splits
    ds = training_set(mode, train, augmented)
    rows = []
    for seed in cfg.seeds:
        model = train_gnn(ds, cfg, val, seed)
        rows.append({"mode": mode, "seed": int(seed), "val_acc": evaluate(model, val),
                     "test_acc": evaluate(model, test), "n_train": len(ds)})
        log.info("%s seed %d val %.3f test %.3f", mode, seed, rows[-1]["val_acc"], rows[-1]["test_acc"])
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    """mode -> (mean test acc, std test acc, mean val acc)."""
    out = {}
    for mode in dict.fromkeys(r["mode"] for r in rows):
        test = np.array([r["test_acc"] for r in rows if r["mode"] == mode])
        val = np.array([r["val_acc"] for r in rows if r["mode"] == mode])
        out[mode] = (float(test.mean()), float(test.std()), float(val.mean()))
    return out
