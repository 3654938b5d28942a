"""Graph-transformer score network and noisy-graph classifier.

Both networks share one permutation-equivariant backbone: node channels attend
over nodes with a per-head bias read from edge channels, and edge channels are
updated from symmetric pairwise node interactions. The score network predicts
the injected noise and reports the score as ``-eps / std(t)``.
"""
from __future__ import annotations

import copy
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .graph import GraphDataset
from .sde import DiffusionSde, mask_adj, mask_x

log = logging.getLogger(__name__)

MAGIC = b"OODA"
CKPT_VERSION = 1
KIND_SCORE, KIND_CLASSIFIER = 0, 1


class TrainingError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ScoreEstimate(NamedTuple):
    score_x: torch.Tensor
    score_a: torch.Tensor


@dataclass(frozen=True)
class ArchConfig:
    num_layers: int = 3
    num_heads: int = 4
    hidden_x: int = 64
    hidden_a: int = 16
    time_dim: int = 32

    def __post_init__(self):
        if self.hidden_x % self.num_heads:
            raise ValueError("hidden_x must be divisible by num_heads")
        if min(self.num_layers, self.num_heads, self.hidden_x, self.hidden_a, self.time_dim) < 1:
            raise ValueError("architecture sizes must be positive")


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-12
    batch_size: int = 64
    epochs: int = 100
    max_steps: Optional[int] = None  # overrides epochs when set
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# --- building blocks -----------------------------------------------------------------

def sym_t(adj: torch.Tensor) -> torch.Tensor:
    return 0.5 * (adj + adj.transpose(-3, -2))


def clean_adj(adj: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Symmetrize, clear the diagonal, zero masked rows/columns."""
    n = adj.shape[-2]
    eye = torch.eye(n, dtype=torch.bool, device=adj.device).unsqueeze(-1)
    return mask_adj(sym_t(adj).masked_fill(eye, 0.0), mask)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
        ang = 1000.0 * t[:, None] * freqs[None]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        if emb.shape[-1] < self.dim:
            emb = F.pad(emb, (0, self.dim - emb.shape[-1]))
        return self.mlp(emb)


class GraphTransformerLayer(nn.Module):
    def __init__(self, hx: int, ha: int, heads: int, ht: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hx, 3 * hx)
        self.edge_bias = nn.Linear(ha, heads)
        self.attn_out = nn.Linear(hx, hx)
        self.norm_x1 = nn.LayerNorm(hx)
        self.ff_x = nn.Sequential(nn.Linear(hx, 2 * hx), nn.SiLU(), nn.Linear(2 * hx, hx))
        self.norm_x2 = nn.LayerNorm(hx)
        self.pair_add = nn.Linear(hx, ha)
        self.pair_mul = nn.Linear(hx, ha)
        self.edge_lin = nn.Linear(ha, ha)
        self.norm_e = nn.LayerNorm(ha)
        self.time_x = nn.Linear(ht, hx)
        self.time_e = nn.Linear(ht, ha)

    def forward(self, h, e, mask, pair_mask, temb):
        B, n, hx = h.shape
        H, dh = self.heads, hx // self.heads
        h = h + self.time_x(temb)[:, None]
        q, k, v = self.qkv(h).view(B, n, 3, H, dh).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        logits = logits + self.edge_bias(e).permute(0, 3, 1, 2)
        logits = logits.masked_fill(~mask[:, None, None, :], -1e9)
        att = torch.softmax(logits, dim=-1)
        msg = (att @ v).transpose(1, 2).reshape(B, n, hx)
        h = self.norm_x1(h + self.attn_out(msg))
        h = self.norm_x2(h + self.ff_x(h)) * mask[..., None]

        p = self.pair_add(h) + 0.5 * self.time_e(temb)[:, None]
        m = self.pair_mul(h)
        upd = self.edge_lin(e) + p[:, :, None] + p[:, None, :] + m[:, :, None] * m[:, None, :]
        # normalizing the edge stream keeps eps_a bounded when A_t drifts far outside the data range
        e = self.norm_e(e + F.silu(upd)) * pair_mask
        return h, e


class GraphBackbone(nn.Module):
    def __init__(self, a: int, b: int, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.time = TimeEmbedding(arch.time_dim)
        self.in_x = nn.Linear(a + b, arch.hidden_x)
        self.in_e = nn.Linear(2 * b, arch.hidden_a)
        self.layers = nn.ModuleList(
            GraphTransformerLayer(arch.hidden_x, arch.hidden_a, arch.num_heads, arch.time_dim)
            for _ in range(arch.num_layers))

    def forward(self, x, adj, mask, t):
        mask = mask.bool()
        x = mask_x(x, mask)
        adj = clean_adj(adj, mask)
        deg = adj.sum(dim=2)  # (B, n, b)
        two_hop = torch.einsum("bijc,bjkc->bikc", adj, adj)
        mf = mask.to(x.dtype)
        pair_mask = (mf[:, :, None] * mf[:, None, :]).unsqueeze(-1)
        h = self.in_x(torch.cat([x, deg], dim=-1)) * mf[..., None]
        e = self.in_e(torch.cat([adj, two_hop], dim=-1)) * pair_mask
        temb = self.time(t)
        for layer in self.layers:
            h, e = layer(h, e, mask, pair_mask, temb)
        return h, e, temb, pair_mask


def _as_time(t, batch: int, dtype) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(dtype)
        return t.expand(batch) if t.ndim == 0 else t
    return torch.full((batch,), float(t), dtype=dtype)


class ScoreNetwork(nn.Module):
    """s_theta(X_t, A_t, t) for both the node-feature and the adjacency component."""

    kind = KIND_SCORE

    def __init__(self, a: int, b: int, n_max: int, arch: ArchConfig = ArchConfig(),
                 sde_x: DiffusionSde = DiffusionSde(), sde_a: DiffusionSde = DiffusionSde()):
        super().__init__()
        self.a, self.b, self.n_max, self.num_classes = a, b, n_max, 0
        self.arch, self.sde_x, self.sde_a = arch, sde_x, sde_a
        self.backbone = GraphBackbone(a, b, arch)
        self.out_x = nn.Linear(arch.hidden_x, a)
        self.out_e = nn.Linear(arch.hidden_a, b)

    def _check(self, x, adj, mask):
        if x.shape[-1] != self.a or adj.shape[-1] != self.b or adj.shape[-2] != x.shape[-2] \
                or mask.shape[-1] != x.shape[-2]:
            raise ValueError(f"shape mismatch: X{tuple(x.shape)} A{tuple(adj.shape)} "
                             f"mask{tuple(mask.shape)} for a={self.a}, b={self.b}")

    def predict_noise(self, x, adj, mask, t):
        self._check(x, adj, mask)
        t = _as_time(t, x.shape[0], x.dtype)
        h, e, _, _ = self.backbone(x, adj, mask, t)
        eps_x = mask_x(self.out_x(h), mask.bool())
        eps_a = clean_adj(self.out_e(e), mask.bool())
        return eps_x, eps_a

    def forward(self, x, adj, mask, t) -> ScoreEstimate:
        t = _as_time(t, x.shape[0], x.dtype)
        eps_x, eps_a = self.predict_noise(x, adj, mask, t)
        _, std_x = self.sde_x.marginal_params(t)
        _, std_a = self.sde_a.marginal_params(t)
        return ScoreEstimate(-eps_x / std_x[:, None, None], -eps_a / std_a[:, None, None, None])


class GraphClassifier(nn.Module):
    """phi_t(X_t, A_t): class logits for a noisy graph."""

    kind = KIND_CLASSIFIER

    def __init__(self, a: int, b: int, n_max: int, num_classes: int, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.a, self.b, self.n_max, self.num_classes = a, b, n_max, num_classes
        self.arch = arch
        self.backbone = GraphBackbone(a, b, arch)
        hx, ha = arch.hidden_x, arch.hidden_a
        self.head = nn.Sequential(nn.Linear(2 * hx + ha + arch.time_dim, hx), nn.SiLU(),
                                  nn.Linear(hx, num_classes))

    def forward(self, x, adj, mask, t) -> torch.Tensor:
        t = _as_time(t, x.shape[0], x.dtype)
        mask = mask.bool()
        h, e, temb, pair_mask = self.backbone(x, adj, mask, t)
        mf = mask.to(h.dtype)[..., None]
        cnt = mf.sum(1).clamp_min(1.0)
        mean = h.sum(1) / cnt
        mx = h.masked_fill(~mask[..., None], -1e9).amax(1) * (cnt > 0.5)
        e_mean = e.sum((1, 2)) / (pair_mask.sum((1, 2)).clamp_min(1.0))
        return self.head(torch.cat([mean, mx, e_mean, temb], dim=-1))


def score_forward(net: ScoreNetwork, x, adj, mask, t) -> ScoreEstimate:
    return net(x, adj, mask, t)


def classifier_forward(phi: GraphClassifier, x, adj, mask, t) -> torch.Tensor:
    return phi(x, adj, mask, t)


def class_logprob_grad(phi: GraphClassifier, x, adj, mask, t, y):
    """Gradient of log softmax(phi)[y] w.r.t. X_t and A_t (batched, per-sample y)."""
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(x.shape[0])
    if int(y.max()) >= phi.num_classes or int(y.min()) < 0:
        raise ValueError(f"class index out of range for M={phi.num_classes}")
    with torch.enable_grad():
        xg = x.detach().clone().requires_grad_(True)
        ag = adj.detach().clone().requires_grad_(True)
        logp = torch.log_softmax(phi(xg, ag, mask, t), dim=-1)
        sel = logp.gather(1, y[:, None]).sum()
        gx, ga = torch.autograd.grad(sel, [xg, ag])
    gx = mask_x(gx, mask.bool())
    ga = clean_adj(ga, mask.bool())
    if not (torch.isfinite(gx).all() and torch.isfinite(ga).all()):
        raise NumericError("non-finite classifier gradient")
    return gx, ga


# --- data plumbing -------------------------------------------------------------------

@dataclass
class GraphTensors:
    x: torch.Tensor
    adj: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.x.shape[0]

    def index(self, idx) -> "GraphTensors":
        return GraphTensors(self.x[idx], self.adj[idx], self.mask[idx], self.labels[idx])


def to_tensors(graphs, dtype=torch.float32) -> GraphTensors:
    graphs = list(graphs)
    x = torch.as_tensor(np.stack([g.node_features for g in graphs]), dtype=dtype)
    adj = torch.as_tensor(np.stack([g.adjacency for g in graphs]), dtype=dtype)
    mask = torch.as_tensor(np.stack([g.node_mask for g in graphs]))
    labels = torch.as_tensor([-1 if g.label is None else g.label for g in graphs], dtype=torch.long)
    return GraphTensors(x, adj, mask, labels)


class Ema:
    """Exponential moving average of parameters with the usual warmup (1+k)/(10+k)."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.steps = 0
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def update(self, model: nn.Module):
        self.steps += 1
        d = min(self.decay, (1 + self.steps) / (10 + self.steps))
        with torch.no_grad():
            for k, v in model.state_dict().items():
                if v.dtype.is_floating_point:
                    self.shadow[k].mul_(d).add_(v.detach(), alpha=1 - d)
                else:
                    self.shadow[k].copy_(v)

    def copy_to(self, model: nn.Module) -> nn.Module:
        out = copy.deepcopy(model)
        out.load_state_dict(self.shadow)
        return out


def _batches(n: int, cfg: TrainConfig, gen: torch.Generator):
    steps = 0
    epoch = 0
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * math.ceil(n / cfg.batch_size)
    while steps < total:
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.batch_size):
            if steps >= total:
                return
            yield epoch, perm[s:s + cfg.batch_size]
            steps += 1
        epoch += 1


def _sample_t(batch: int, sde: DiffusionSde, gen: torch.Generator) -> torch.Tensor:
    u = torch.rand(batch, generator=gen)
    return sde.eps_time + (sde.T - sde.eps_time) * u


def dsm_loss(net: ScoreNetwork, batch: GraphTensors, t: torch.Tensor, gen: torch.Generator):
    """Denoising score matching with std^2 weighting, i.e. ||eps_pred - z||^2 per graph."""
    noisy_x, zx = net.sde_x.perturb(batch.x, t, gen, adjacency=False, mask=batch.mask)
    noisy_a, za = net.sde_a.perturb(batch.adj, t, gen, adjacency=True, mask=batch.mask)
    eps_x, eps_a = net.predict_noise(noisy_x, noisy_a, batch.mask, t)
    per_graph = ((eps_x - zx) ** 2).sum((1, 2)) + ((eps_a - za) ** 2).sum((1, 2, 3))
    return per_graph.mean()


def _optimizer(net, cfg):
    return torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_score(ds: GraphDataset, sde_x: DiffusionSde, sde_a: DiffusionSde, cfg: TrainConfig,
                arch: ArchConfig = ArchConfig()) -> ScoreNetwork:
    """Fit the score network on unlabeled graphs; returns the EMA copy with ``loss_history``."""
    if len(ds) == 0:
        raise TrainingError("cannot train on an empty dataset")
    torch.manual_seed(cfg.seed)
    net = ScoreNetwork(ds.a, ds.b, ds.n_max, arch, sde_x, sde_a)
    data = to_tensors(ds.graphs)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = _optimizer(net, cfg)
    ema = Ema(net, cfg.ema_decay)
    history = []
    for step, (epoch, idx) in enumerate(_batches(len(data), cfg, gen)):
        batch = data.index(idx)
        t = _sample_t(len(idx), sde_x, gen)
        loss = dsm_loss(net, batch, t, gen)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite score loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        ema.update(net)
        history.append(loss.item())
        if step % 500 == 0:
            log.info("score step %d epoch %d loss %.4f", step, epoch, loss.item())
    out = ema.copy_to(net) if ema.steps else net
    out.eval()
    out.loss_history = history
    return out


def train_classifier(ds: GraphDataset, sde_x: DiffusionSde, sde_a: DiffusionSde, cfg: TrainConfig,
                     arch: ArchConfig = ArchConfig()) -> GraphClassifier:
    """Cross-entropy on graphs perturbed at t ~ U[eps, T]; returns the EMA copy."""
    if len(ds) == 0:
        raise TrainingError("cannot train on an empty dataset")
    labels = ds.labels()
    if (labels < 0).any():
        raise ValueError(f"unlabeled graph at index {int(np.flatnonzero(labels < 0)[0])}")
    torch.manual_seed(cfg.seed)
    phi = GraphClassifier(ds.a, ds.b, ds.n_max, ds.num_classes, arch)
    data = to_tensors(ds.graphs)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = _optimizer(phi, cfg)
    ema = Ema(phi, cfg.ema_decay)
    history = []
    for step, (epoch, idx) in enumerate(_batches(len(data), cfg, gen)):
        batch = data.index(idx)
        t = _sample_t(len(idx), sde_x, gen)
        nx, _ = sde_x.perturb(batch.x, t, gen, adjacency=False, mask=batch.mask)
        na, _ = sde_a.perturb(batch.adj, t, gen, adjacency=True, mask=batch.mask)
        loss = F.cross_entropy(phi(nx, na, batch.mask, t), batch.labels)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite classifier loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(phi.parameters(), cfg.grad_clip)
        opt.step()
        ema.update(phi)
        history.append(loss.item())
        if step % 500 == 0:
            log.info("classifier step %d epoch %d loss %.4f", step, epoch, loss.item())
    out = ema.copy_to(phi) if ema.steps else phi
    out.eval()
    out.loss_history = history
    return out


@torch.no_grad()
def predict_proba(phi: GraphClassifier, graphs, t: float, batch_size: int = 256) -> np.ndarray:
    graphs = list(graphs)
    out = []
    for s in range(0, len(graphs), batch_size):
        d = to_tensors(graphs[s:s + batch_size])
        out.append(torch.softmax(phi(d.x, d.adj, d.mask, t), dim=-1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, phi.num_classes))


# --- checkpoints ---------------------------------------------------------------------
# Layout (little-endian): b"OODA", u32 version, u8 kind, 9 x i32
# (L, H, hidden_x, hidden_a, time_dim, a, b, n_max, M), two SDE records
# (u8 VP=0/VE=1, f64 beta_min, f64 beta_max, i32 num_steps, f64 eps_time),
# u32 block count, then per block: u16 name length, name, u8 ndim, u32 dims,
# f32 data in state_dict order.

_HEAD = struct.Struct("<4sIB9i")
_SDE = struct.Struct("<Bddid")


def _pack_sde(s: Optional[DiffusionSde]) -> bytes:
    s = s or DiffusionSde()
    return _SDE.pack(0 if s.kind == "VP" else 1, s.beta_min, s.beta_max, s.num_steps, s.eps_time)


def _unpack_sde(buf: bytes) -> DiffusionSde:
    k, lo, hi, n, eps = _SDE.unpack(buf)
    return DiffusionSde("VP" if k == 0 else "VE", lo, hi, n, eps)


def _header_fields(net) -> tuple:
    ar = net.arch
    return (ar.num_layers, ar.num_heads, ar.hidden_x, ar.hidden_a, ar.time_dim,
            net.a, net.b, net.n_max, net.num_classes)


def checkpoint_bytes(net) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, CKPT_VERSION, net.kind, *_header_fields(net)))
    buf.write(_pack_sde(getattr(net, "sde_x", None)))
    buf.write(_pack_sde(getattr(net, "sde_a", None)))
    state = net.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(net, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, expect: Optional[dict] = None):
    """Rebuild a network from a checkpoint; ``expect`` maps header fields to required values."""
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size + 2 * _SDE.size + 4:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, kind, *fields = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    names = ("num_layers", "num_heads", "hidden_x", "hidden_a", "time_dim", "a", "b", "n_max", "M")
    header = dict(zip(names, fields), kind=kind)
    for key, want in (expect or {}).items():
        if header.get(key) != want:
            raise CheckpointError(f"{path}: header {key}={header.get(key)} but expected {want}")
    off = _HEAD.size
    sde_x = _unpack_sde(data[off:off + _SDE.size])
    sde_a = _unpack_sde(data[off + _SDE.size:off + 2 * _SDE.size])
    off += 2 * _SDE.size
    arch = ArchConfig(*fields[:5])
    a, b, n_max, m = fields[5:]
    if kind == KIND_SCORE:
        net = ScoreNetwork(a, b, n_max, arch, sde_x, sde_a)
    elif kind == KIND_CLASSIFIER:
        net = GraphClassifier(a, b, n_max, m, arch)
    else:
        raise CheckpointError(f"{path}: unknown network kind {kind}")
    state = net.state_dict()
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count != len(state):
        raise CheckpointError(f"{path}: {count} parameter blocks, architecture has {len(state)}")
    loaded = {}
    for name, ref in state.items():
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        got = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if got != name or tuple(shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: block {got}{shape} does not match {name}{tuple(ref.shape)}")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    net.load_state_dict(loaded)
    net.eval()
    return net
