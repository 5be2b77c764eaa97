"""Multi-resolution spatiotemporal hash encoding of event coordinates.

Each level is an independent grid over (y, x, time). A coordinate is mapped
into grid units, the 8 enclosing vertices are looked up in that level's
table (directly when the grid fits, through a spatial hash otherwise) and
their feature rows are trilinearly interpolated. Levels are concatenated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

PRIMES = (1, 2654435761, 805459861)
# corner offsets in (y, x, t); bit i of the corner id selects the +1 offset on axis i
CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


@dataclass
class HashGridConfig:
    """Resolutions are given per axis in (y, x, time) order."""

    levels: int = 4
    feature_dim: int = 2
    table_size: int = 2**19
    r_min: tuple[int, int, int] = (8, 8, 1)
    r_max: tuple[int, int, int] = (180, 320, 8)
    extent: tuple[int, int, int] = (720, 1280, 20)  # (H, W, time bins)
    init_scale: float = 1e-4

    def __post_init__(self):
        self.r_min = tuple(int(v) for v in self.r_min)
        self.r_max = tuple(int(v) for v in self.r_max)
        self.extent = tuple(int(v) for v in self.extent)
        if self.levels < 1:
            raise ValueError("need at least one level")
        if any(a < 1 or b < a for a, b in zip(self.r_min, self.r_max)):
            raise ValueError(f"invalid resolution bounds {self.r_min} -> {self.r_max}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"invalid extent {self.extent}")

    @property
    def n_features(self) -> int:
        return self.levels * self.feature_dim


def level_resolutions(config: HashGridConfig) -> np.ndarray:
    """Per-level integer grid resolutions, geometric from r_min to r_max (round half up)."""
    lo = np.asarray(config.r_min, dtype=np.float64)
    hi = np.asarray(config.r_max, dtype=np.float64)
    if config.levels == 1:
        return hi.astype(np.int64)[None, :]
    frac = np.arange(config.levels, dtype=np.float64)[:, None] / (config.levels - 1)
    res = np.floor(lo * (hi / lo) ** frac + 0.5).astype(np.int64)
    res[0], res[-1] = lo.astype(np.int64), hi.astype(np.int64)
    return np.maximum.accumulate(res, axis=0)


def is_direct(res, table_size: int) -> bool:
    return int(np.prod(np.asarray(res, dtype=np.int64) + 1)) <= table_size


def vertex_index(v, res, table_size: int):
    """Table row of integer vertex ``v`` (..., 3) on a grid of resolution ``res``.

    Row-major (time fastest) when the level's (res+1)^3 vertices fit in the
    table, otherwise the XOR-of-primes spatial hash modulo the table size.
    """
    v = np.asarray(v, dtype=np.int64)
    res = np.asarray(res, dtype=np.int64)
    if is_direct(res, table_size):
        dims = res + 1
        return (v[..., 0] * dims[1] + v[..., 1]) * dims[2] + v[..., 2]
    u = v.astype(np.uint64)
    h = u[..., 0] * np.uint64(PRIMES[0])
    h ^= u[..., 1] * np.uint64(PRIMES[1])
    h ^= u[..., 2] * np.uint64(PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


def _vertex_index_torch(v: torch.Tensor, res: np.ndarray, table_size: int) -> torch.Tensor:
    if is_direct(res, table_size):
        d1, d2 = int(res[1]) + 1, int(res[2]) + 1
        return (v[..., 0] * d1 + v[..., 1]) * d2 + v[..., 2]
    # int64 products stay exact while coordinates are below 2^31
    h = v[..., 0] * PRIMES[0]
    h = torch.bitwise_xor(h, v[..., 1] * PRIMES[1])
    h = torch.bitwise_xor(h, v[..., 2] * PRIMES[2])
    return torch.remainder(h, table_size)


def init_tables(config: HashGridConfig, generator: torch.Generator | None = None,
                dtype=torch.float32) -> torch.Tensor:
    """Tables (L, T, F) uniform in [-init_scale, init_scale]."""
    t = torch.rand((config.levels, config.table_size, config.feature_dim),
                   generator=generator, dtype=dtype)
    return (t * 2 - 1) * config.init_scale


@dataclass
class Touched:
    """Forward-pass bookkeeping: rows and weights of every interpolated vertex."""

    index: torch.Tensor    # (N, L, 8) int64
    weight: torch.Tensor   # (N, L, 8)
    n_clamped: int = 0
    levels: int = field(default=0)

    def entries(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Unique (level, row) pairs touched, as two 1-D tensors."""
        L = self.index.shape[1]
        lvl = torch.arange(L).view(1, L, 1).expand_as(self.index)
        flat = torch.unique(lvl.reshape(-1) * (2**40) + self.index.reshape(-1))
        return flat // (2**40), flat % (2**40)


def grid_positions(coords: torch.Tensor, config: HashGridConfig) -> tuple[torch.Tensor, int]:
    """Map (s, y, x) coordinates to clamped continuous (y, x, t) extent units."""
    yxt = coords[:, [1, 2, 0]]
    upper = torch.tensor([e - 1 for e in config.extent], dtype=coords.dtype)
    clamped = yxt.clamp(min=torch.zeros_like(upper), max=upper)
    n_clamped = int((clamped != yxt).any(dim=1).sum())
    return clamped, n_clamped


def encode(coords, tables: torch.Tensor, config: HashGridConfig) -> tuple[torch.Tensor, Touched]:
    """Encode (N, 3) coordinates given as (s, y, x) into (N, L*F) features.

    Coordinates outside the window extent are clamped; the count is kept in
    ``Touched.n_clamped``. Fractional coordinates are allowed.
    """
    coords = torch.as_tensor(coords, dtype=tables.dtype)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError("coords must have shape (N, 3)")
    N = coords.shape[0]
    L, T, F = tables.shape
    pos, n_clamped = grid_positions(coords, config)
    denom = torch.tensor([max(e - 1, 1) for e in config.extent], dtype=tables.dtype)
    res_all = level_resolutions(config)
    corners = torch.from_numpy(CORNERS)
    idx = torch.empty((N, L, 8), dtype=torch.int64)
    wts = torch.empty((N, L, 8), dtype=tables.dtype)
    feats = []
    for lvl in range(L):
        res = res_all[lvl]
        scale = torch.tensor(res, dtype=tables.dtype) / denom
        g = pos * scale
        base = torch.floor(g).long()
        base = torch.minimum(base, torch.tensor(res - 1))
        base = torch.clamp(base, min=0)
        frac = g - base.to(g.dtype)
        verts = base[:, None, :] + corners[None, :, :]
        rows = _vertex_index_torch(verts, res, T)
        w = torch.where(corners[None, :, :].bool(), frac[:, None, :], 1 - frac[:, None, :]).prod(dim=2)
        idx[:, lvl] = rows
        wts[:, lvl] = w
        feats.append((tables[lvl][rows] * w[..., None]).sum(dim=1))
    out = torch.cat(feats, dim=1) if feats else torch.zeros((N, 0), dtype=tables.dtype)
    return out, Touched(idx, wts, n_clamped, L)


def encode_backward(touched: Touched, upstream: torch.Tensor, feature_dim: int) -> dict:
    """Sparse table gradient {(level, row): grad (F,)} for upstream dL/d(features)."""
    upstream = torch.as_tensor(upstream)
    N, L, _ = touched.index.shape
    up = upstream.reshape(N, L, feature_dim)
    grads: dict = {}
    contrib = touched.weight[..., None] * up[:, :, None, :]  # (N, L, 8, F)
    for lvl in range(L):
        rows = touched.index[:, lvl].reshape(-1)
        vals = contrib[:, lvl].reshape(-1, feature_dim)
        uniq, inv = torch.unique(rows, return_inverse=True)
        acc = torch.zeros((len(uniq), feature_dim), dtype=vals.dtype).index_add_(0, inv, vals)
        for r, g in zip(uniq.tolist(), acc):
            grads[(lvl, r)] = g
    return grads


def scatter_table_grad(touched: Touched, upstream: torch.Tensor, shape) -> torch.Tensor:
    """Dense-buffer form of :func:`encode_backward` (rows not touched stay zero)."""
    L, T, F = shape
    N = touched.index.shape[0]
    up = upstream.reshape(N, L, F)
    contrib = touched.weight[..., None] * up[:, :, None, :]
    offsets = (torch.arange(L) * T).view(1, L, 1)
    flat = (touched.index + offsets).reshape(-1)
    grad = torch.zeros((L * T, F), dtype=upstream.dtype)
    grad.index_add_(0, flat, contrib.reshape(-1, F))
    return grad.view(L, T, F)


class HashEncodeFunction(torch.autograd.Function):
    """Autograd wrapper whose backward is the sparse accumulation above."""

    @staticmethod
    def forward(ctx, tables, coords, config, holder):
        with torch.no_grad():
            out, touched = encode(coords, tables, config)
        ctx.touched = touched
        ctx.table_shape = tables.shape
        holder.append(touched)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        grad = scatter_table_grad(ctx.touched, grad_out, ctx.table_shape)
        return grad, None, None, None


def encode_autograd(coords, tables: torch.Tensor, config: HashGridConfig) -> tuple[torch.Tensor, Touched]:
    """Differentiable encoding; also returns the touched bookkeeping."""
    coords = torch.as_tensor(coords, dtype=tables.dtype)
    holder: list = []
    out = HashEncodeFunction.apply(tables, coords, config, holder)
    return out, holder[0]
