"""Unsupervised optical flow by matching feature fields across time.

A small residual conv net maps the field at time t to a displacement per
pixel. It is trained by warping the field at t+dt back with the predicted
flow and penalizing the Z-normalized Charbonnier difference over a
Gaussian pyramid, plus a first-order smoothness term.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .events import EventStream, discretize, window
from .field import GRN, DepthwiseConv2d, FeatureField, FeatureFieldModel, LayerNorm2d, Pointwise
from .synth import FlowField
from .train import OptimizerConfig, ParameterStore, backward, linear_lr, optimizer_step

BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class PyramidConfig:
    levels: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("pyramid needs at least one level")


@dataclass
class CharbonnierConfig:
    epsilon: float = 1e-3
    beta: float = 0.5

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.beta <= 1:
            raise ValueError("need epsilon > 0 and 0 < beta <= 1")


@dataclass
class FlowMetrics:
    aee: float
    three_pe: float
    aae: float
    n_pixels: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- pyramid and warp ----------------------------------------------------


def binomial_smooth(x: torch.Tensor) -> torch.Tensor:
    """Separable 5x5 binomial filter with edge replication; x is (B, C, H, W)."""
    C = x.shape[1]
    k = torch.tensor(BINOMIAL5, dtype=x.dtype)
    xp = F.pad(x, (2, 2, 2, 2), mode="replicate")
    xp = F.conv2d(xp, k.view(1, 1, 1, 5).expand(C, 1, 1, 5), groups=C)
    return F.conv2d(xp, k.view(1, 1, 5, 1).expand(C, 1, 5, 1), groups=C)


def downsample2(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x reduction: samples at half-pixel offsets, i.e. 2x2 block means.

    Odd sizes are edge-replicated to even first, giving ceil(size/2).
    """
    H, W = x.shape[-2:]
    x = F.pad(x, (0, W % 2, 0, H % 2), mode="replicate")
    return F.avg_pool2d(x, 2)


def gaussian_pyramid(x: torch.Tensor, levels: int, is_flow: bool = False) -> list[torch.Tensor]:
    """Level 0 is the input; each further level is smoothed then halved.

    Flow pyramids also halve the vectors so they stay in level pixel units.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    squeeze = x.ndim == 3
    cur = x[None] if squeeze else x
    out = [cur]
    for lvl in range(1, levels):
        H, W = cur.shape[-2:]
        if math.ceil(H / 2) < 2 or math.ceil(W / 2) < 2:
            warnings.warn(f"pyramid stopped at {lvl} levels: next level smaller than 2x2")
            break
        cur = downsample2(binomial_smooth(cur))
        if is_flow:
            cur = cur * 0.5
        out.append(cur)
    return [o[0] for o in out] if squeeze else out


def warp(field: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly sample ``field`` at u + flow(u).

    field (B, C, H, W), flow (B, 2, H, W) with channel 0 = x displacement.
    Returns the warped field and a (B, H, W) mask that is False where the
    sample point leaves the image.
    """
    squeeze = field.ndim == 3
    if squeeze:
        field, flow = field[None], flow[None]
    B, C, H, W = field.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=flow.dtype), torch.arange(W, dtype=flow.dtype),
                            indexing="ij")
    px = xs[None] + flow[:, 0]
    py = ys[None] + flow[:, 1]
    valid = (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)
    gx = 2 * px / max(W - 1, 1) - 1
    gy = 2 * py / max(H - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(field, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    out = out * valid[:, None].to(out.dtype)
    if squeeze:
        return out[0], valid[0]
    return out, valid


# -- losses --------------------------------------------------------------


def charbonnier(x: torch.Tensor, cfg: CharbonnierConfig, dim: int = 1) -> torch.Tensor:
    """Channel mean of (x^2 + eps^2)^beta."""
    return (x * x + cfg.epsilon**2).pow(cfg.beta).mean(dim=dim)


def _level_weight(level: int, shape, full_shape) -> float:
    # level index 0 is the full-resolution scale sigma = 1; weight 4^sigma times
    # the level's share of full-resolution pixels
    sigma = level + 1
    return 4.0**sigma * (shape[0] * shape[1]) / (full_shape[0] * full_shape[1])


def photometric_loss(f_t: torch.Tensor, f_t1: torch.Tensor, flow: torch.Tensor,
                     levels: int = 2, charb: CharbonnierConfig | None = None,
                     return_skipped: bool = False):
    """Pyramid photometric loss of ``f_t`` against ``f_t1`` warped by ``flow``.

    Per level: residual divided by sqrt(Z_i) with Z_i the summed squared
    energy of channel i in both fields; Charbonnier averaged over channels
    and over valid (in-bounds) pixels, weighted by 4^sigma times the
    level's pixel share. Channels with Z_i = 0 are skipped.
    """
    charb = charb or CharbonnierConfig()
    if f_t.ndim == 3:
        f_t, f_t1, flow = f_t[None], f_t1[None], flow[None]
    full = f_t.shape[-2:]
    pa = gaussian_pyramid(f_t, levels)
    pb = gaussian_pyramid(f_t1, levels)
    pv = gaussian_pyramid(flow, levels, is_flow=True)
    total = f_t.new_zeros(())
    skipped = []
    for lvl, (a, b, v) in enumerate(zip(pa, pb, pv)):
        z = (a * a).sum(dim=(2, 3)) + (b * b).sum(dim=(2, 3))  # (B, C)
        keep = z > 0
        skipped.append(int((~keep).sum()))
        scale = torch.where(keep, torch.rsqrt(torch.where(keep, z, torch.ones_like(z))), torch.zeros_like(z))
        wb, valid = warp(b, v)
        res = (a - wb) * scale[:, :, None, None]
        per_pixel = (res * res + charb.epsilon**2).pow(charb.beta)
        n_ch = keep.sum(dim=1).clamp(min=1).to(res.dtype)
        per_pixel = (per_pixel * keep[:, :, None, None]).sum(dim=1) / n_ch[:, None, None]
        mask = valid.to(res.dtype)
        mean = (per_pixel * mask).sum() / mask.sum().clamp(min=1)
        total = total + _level_weight(lvl, a.shape[-2:], full) * mean
    return (total, skipped) if return_skipped else total


def smoothness_reg(flow: torch.Tensor, levels: int = 2, charb: CharbonnierConfig | None = None) -> torch.Tensor:
    """First-order smoothness over 4-connected neighbor pairs on the flow pyramid.

    Each unordered neighbor pair is counted from both ends, matching a sum
    over u and u' in its 4-neighborhood; border pixels have fewer neighbors.
    """
    charb = charb or CharbonnierConfig()
    if flow.ndim == 3:
        flow = flow[None]
    full = flow.shape[-2:]
    total = flow.new_zeros(())
    for lvl, v in enumerate(gaussian_pyramid(flow, levels, is_flow=True)):
        H, W = v.shape[-2:]
        s = flow.new_zeros(())
        if W > 1:
            s = s + 2 * charbonnier(v[..., :, 1:] - v[..., :, :-1], charb).sum()
        if H > 1:
            s = s + 2 * charbonnier(v[..., 1:, :] - v[..., :-1, :], charb).sum()
        per_pixel = s / (v.shape[0] * H * W)
        total = total + _level_weight(lvl, (H, W), full) * per_pixel
    return total


# -- flow network --------------------------------------------------------


class FlowBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 9, expansion: int = 2, grn: bool = True):
        super().__init__()
        hidden = channels * expansion
        self.dw = DepthwiseConv2d(channels, kernel)
        self.norm = LayerNorm2d(channels)
        self.pw1 = Pointwise(channels, hidden)
        self.grn = GRN(hidden) if grn else nn.Identity()
        self.pw2 = Pointwise(hidden, channels)

    def forward(self, x):
        y = F.gelu(self.pw1(self.norm(self.dw(x))))
        return x + self.pw2(self.grn(y))


class FlowNet(nn.Module):
    """Four 9x9 residual blocks on the p-channel field and a zero-initialized 2-channel head."""

    def __init__(self, channels: int = 32, blocks: int = 4, kernel: int = 9, expansion: int = 2,
                 grn: bool = True, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList(FlowBlock(channels, kernel, expansion, grn) for _ in range(blocks))
            self.head = Pointwise(channels, 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.receptive_field = 1 + blocks * (kernel - 1)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.head(x)


def predict_flow(field, net: FlowNet) -> FlowField:
    data = torch.as_tensor(field.data if isinstance(field, FeatureField) else field)
    with torch.no_grad():
        v = net(data[None].to(net.head.weight.dtype))[0].double().numpy()
    return FlowField(v, np.ones(v.shape[1:], dtype=bool))


# -- metrics -------------------------------------------------------------


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Angle between the 3-vectors (vx, vy, 1) of prediction and ground truth."""
    num = pred[0] * gt[0] + pred[1] * gt[1] + 1.0
    den = np.sqrt((pred[0] ** 2 + pred[1] ** 2 + 1.0) * (gt[0] ** 2 + gt[1] ** 2 + 1.0))
    return np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))


def flow_metrics(pred, gt, mask=None, event_mask=None) -> FlowMetrics:
    """AEE, fraction of endpoint errors above 3 px, and AAE over the evaluated pixels."""
    pred_v = np.asarray(pred.v if isinstance(pred, FlowField) else pred, dtype=np.float64)
    gt_v = np.asarray(gt.v if isinstance(gt, FlowField) else gt, dtype=np.float64)
    if pred_v.shape != gt_v.shape:
        raise ValueError(f"shape mismatch {pred_v.shape} vs {gt_v.shape}")
    sel = np.ones(gt_v.shape[1:], dtype=bool)
    if isinstance(gt, FlowField):
        sel &= gt.valid
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if event_mask is not None:
        sel &= np.asarray(event_mask, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("no pixels selected for evaluation")
    p, g = pred_v[:, sel], gt_v[:, sel]
    epe = np.sqrt(((p - g) ** 2).sum(axis=0))
    return FlowMetrics(float(epe.mean()), float((epe > 3.0).mean()),
                       float(angular_error_deg(p, g).mean()), n)


# -- training ------------------------------------------------------------


@dataclass
class FlowTrainConfig:
    levels: int = 2
    smooth_weight: float = 1e-3
    epsilon: float = 1e-3
    beta: float = 0.5
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    weight_decay: float = 0.01
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    expansion: int = 2
    grn: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "FlowTrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown flow config keys: {unknown}")
        return cls(**d)


@dataclass
class FlowTrainResult:
    net: FlowNet
    losses: list[float]
    seconds: float = 0.0


def tensor_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def field_pairs(stream: EventStream, model: FeatureFieldModel, t_refs, dt_us: int, bin_us: int,
                chunk: int = 16) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen fields at t and t+dt for every reference time."""
    def fields(times):
        out = []
        for i in range(0, len(times), chunk):
            batch = [discretize(window(stream, int(t), dt_us, "past", bin_us)) for t in times[i:i + chunk]]
            with torch.no_grad():
                out.append(model(batch))
        return torch.cat(out)

    t_refs = np.asarray(t_refs)
    return fields(t_refs), fields(t_refs + dt_us)


def flow_objective(net: FlowNet, fa: torch.Tensor, fb: torch.Tensor, cfg: FlowTrainConfig) -> torch.Tensor:
    charb = CharbonnierConfig(cfg.epsilon, cfg.beta)
    v = net(fa)
    return (photometric_loss(fa, fb, v, cfg.levels, charb)
            + cfg.smooth_weight * smoothness_reg(v, cfg.levels, charb))


def train_flow_on_fields(fa: torch.Tensor, fb: torch.Tensor, cfg: FlowTrainConfig) -> FlowTrainResult:
    """Train the flow net on precomputed (F(t), F(t+dt)) pairs."""
    if len(fa) == 0:
        raise ValueError("no training pairs")
    net = FlowNet(fa.shape[1], expansion=cfg.expansion, grn=cfg.grn, seed=cfg.seed).to(fa.dtype)
    store = ParameterStore(dict(net.named_parameters()))
    opt = OptimizerConfig(cfg.lr_start, cfg.lr_end, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        if len(order) < cfg.batch:
            order.extend(rng.permutation(len(fa)).tolist())
        idx, order = order[:cfg.batch], order[cfg.batch:]
        loss = flow_objective(net, fa[idx], fb[idx], cfg)
        grads = backward(loss, store.params)
        optimizer_step(store, grads, linear_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end), opt)
        losses.append(float(loss.detach()))
    return FlowTrainResult(net, losses, time.perf_counter() - start)


def train_flow(stream: EventStream, model: FeatureFieldModel | None, cfg: FlowTrainConfig,
               dt_us: int, bin_us: int, t_refs=None) -> FlowTrainResult:
    """Train on window pairs of ``stream`` with the feature field frozen.

    Raises if ``model`` is missing, and asserts its parameters are bitwise
    unchanged afterwards.
    """
    if model is None:
        raise ValueError("flow training needs a trained feature-field checkpoint")
    if t_refs is None:
        t_refs = np.arange(dt_us, stream.duration_us - dt_us + 1, bin_us)
    before = tensor_digest(model)
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        fa, fb = field_pairs(stream, model, t_refs, dt_us, bin_us)
        result = train_flow_on_fields(fa, fb, cfg)
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
    if tensor_digest(model) != before:
        raise RuntimeError("feature-field parameters changed during flow training")
    return result
