"""Disparity losses, depth metrics and feature-space stereo block matching.

Losses take torch tensors (any float dtype) so they can train a disparity
predictor; metrics and the block matcher are numpy.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import uniform_filter

from .field import DepthwiseConv2d, Pointwise


@dataclass
class DisparityMap:
    d: np.ndarray
    valid: np.ndarray
    focal: float | None = None
    baseline: float | None = None

    def __post_init__(self):
        if np.any(self.d[self.valid] <= 0):
            raise ValueError("disparity must be positive on valid pixels")

    def to_depth(self) -> np.ndarray:
        if self.focal is None or self.baseline is None:
            raise ValueError("metric conversion needs focal length and baseline")
        return disparity_to_depth(self.d, self.focal, self.baseline, self.valid)


def disparity_to_depth(d, focal: float, baseline: float, valid=None) -> np.ndarray:
    """depth = focal * baseline / disparity; invalid or non-positive pixels become NaN."""
    d = np.asarray(d, dtype=np.float64)
    ok = d > 0 if valid is None else (np.asarray(valid, dtype=bool) & (d > 0))
    out = np.full(d.shape, np.nan)
    out[ok] = focal * baseline / d[ok]
    return out


def _t(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def _mask(mask, like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones_like(like, dtype=torch.bool)
    return _t(mask).to(torch.bool)


# -- losses --------------------------------------------------------------


def normalize_disparity(d, mask=None) -> torch.Tensor:
    """(d - median) / mean |d - median| with statistics over valid pixels.

    Invalid pixels are returned as zero.
    """
    d = _t(d)
    m = _mask(mask, d)
    vals = d[m]
    if vals.numel() < 2:
        raise ValueError("normalization needs at least two valid pixels")
    med = torch.quantile(vals, 0.5)
    dev = (vals - med).abs().mean()
    if not dev > 0:
        raise ValueError("disparity is constant over the valid pixels")
    return torch.where(m, (d - med) / dev, torch.zeros_like(d))


def _grad_l1_sum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a - b
    total = diff.new_zeros(())
    if diff.shape[-1] > 1:
        total = total + (diff[..., :, 1:] - diff[..., :, :-1]).abs().sum()
    if diff.shape[-2] > 1:
        total = total + (diff[..., 1:, :] - diff[..., :-1, :]).abs().sum()
    return total


def gradient_reg(d, d_ref, scales: int = 4) -> torch.Tensor:
    """Multi-scale L1 mismatch of forward-difference gradients.

    (1/|Omega|) sum_sigma 4^sigma sum_u |grad d_sigma - grad d'_sigma|_1, with
    sigma = 1 at full resolution and each coarser scale taking every other
    pixel (no smoothing).
    """
    a, b = _t(d), _t(d_ref)
    n = a.shape[-1] * a.shape[-2]
    total = a.new_zeros(())
    for s in range(scales):
        if min(a.shape[-2:]) < 1:
            break
        total = total + 4.0 ** (s + 1) * _grad_l1_sum(a, b)
        a, b = a[..., ::2, ::2], b[..., ::2, ::2]
    return total / n


def stage1_loss(d, d_pseudo, lam: float = 0.3, scales: int = 4, mask=None) -> torch.Tensor:
    """Mean |normalized d - normalized pseudo| plus lam * gradient_reg of the normalized maps."""
    nd = normalize_disparity(d, mask)
    nt = normalize_disparity(d_pseudo, mask)
    m = _mask(mask, nd)
    data = (nd - nt).abs()[m].mean()
    return data + lam * gradient_reg(nd, nt, scales)


def silog_loss(d, d_star, mask=None, variance_weight: float = 1.0) -> torch.Tensor:
    """mean(r^2) - w * mean(r)^2 with r = log(d / d_star) over the mask.

    ``variance_weight=1`` is the variance of the log ratio and invariant to
    rescaling ``d``; 0.5 gives the half-weighted variant.
    """
    d, t = _t(d), _t(d_star)
    m = _mask(mask, d)
    dv, tv = d[m], t[m]
    if dv.numel() == 0:
        raise ValueError("empty mask")
    if torch.any(dv <= 0) or torch.any(tv <= 0):
        raise ValueError("silog needs positive prediction and target on the mask")
    r = torch.log(dv) - torch.log(tv)
    return (r * r).mean() - variance_weight * r.mean() ** 2


# -- predictor -----------------------------------------------------------


class DisparityHead(nn.Module):
    """Small conv head mapping a (B, p, H, W) field to positive disparity (B, H, W).

    Any callable with this signature can stand in; this one exists so the
    losses can be trained end to end on synthetic fields.
    """

    def __init__(self, channels: int = 32, hidden: int = 16, kernel: int = 5, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.dw = DepthwiseConv2d(channels, kernel)
            self.pw1 = Pointwise(channels, hidden)
            self.pw2 = Pointwise(hidden, 1)

    def forward(self, field: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.pw2(F.gelu(self.pw1(self.dw(field)))))[:, 0] + 1e-3


# -- metrics -------------------------------------------------------------


@dataclass
class DepthMetrics:
    abs_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    one_pe: float | None = None
    two_pe: float | None = None
    mae: float | None = None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def depth_metrics(d, d_star, mask=None, max_depth: float = 80.0, mode: str = "depth") -> DepthMetrics:
    """Standard depth metrics; ``mode='disparity'`` skips the depth cap and adds 1PE/2PE/MAE."""
    d = np.asarray(d, dtype=np.float64)
    t = np.asarray(d_star, dtype=np.float64)
    sel = np.isfinite(t) & (t > 0) & np.isfinite(d)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if mode == "depth":
        sel &= t < max_depth
    elif mode != "disparity":
        raise ValueError(f"unknown mode {mode!r}")
    if not sel.any():
        raise ValueError("no pixels selected for evaluation")
    p, g = d[sel], t[sel]
    ratio = np.maximum(p / g, g / p)
    out = DepthMetrics(
        float(np.mean(np.abs(p / g - 1))), float(np.sqrt(np.mean((p - g) ** 2))),
        float(np.mean(ratio < 1.25)), float(np.mean(ratio < 1.25**2)), float(np.mean(ratio < 1.25**3)),
        int(sel.sum()),
    )
    if mode == "disparity":
        err = np.abs(p - g)
        out.one_pe, out.two_pe, out.mae = float(np.mean(err > 1)), float(np.mean(err > 2)), float(err.mean())
    return out


# -- stereo --------------------------------------------------------------


def _sad_volume(ref: np.ndarray, other: np.ndarray, max_disp: int, block: int, sign: int) -> np.ndarray:
    """cost[d, y, x] = block-summed |ref(x) - other(x + sign*d)| over channels (inf off-image)."""
    C, H, W = ref.shape
    cost = np.full((max_disp + 1, H, W), np.inf)
    for d in range(max_disp + 1):
        diff = np.zeros((H, W))
        if sign < 0:
            diff[:, d:] = np.abs(ref[:, :, d:] - other[:, :, :W - d]).sum(axis=0)
            lo, hi = d, W
        else:
            diff[:, :W - d] = np.abs(ref[:, :, :W - d] - other[:, :, d:]).sum(axis=0)
            lo, hi = 0, W - d
        agg = uniform_filter(diff, size=block, mode="constant") * block * block
        cost[d, :, lo:hi] = agg[:, lo:hi]
    return cost


def _winner(cost: np.ndarray, uniqueness: float) -> tuple[np.ndarray, np.ndarray]:
    """Arg-min disparity and a flag for minima that are unique beyond +-1."""
    best = np.argmin(cost, axis=0)
    bcost = np.take_along_axis(cost, best[None], 0)[0]
    dd = np.arange(cost.shape[0])[:, None, None]
    far = np.abs(dd - best[None]) > 1
    rival = np.where(far, cost, np.inf).min(axis=0)
    unique = rival > bcost * (1 + uniqueness) + 1e-9 * np.maximum(np.abs(bcost), 1.0)
    return best, unique & np.isfinite(bcost)


def block_match_stereo(left, right, max_disp: int, block: int = 9, uniqueness: float = 0.0,
                       lr_tolerance: int = 1) -> DisparityMap:
    """SAD block matching of rectified (C, H, W) feature maps with a left-right check.

    A left pixel x matches right pixel x - d. Pixels whose left and right
    disparities disagree by more than ``lr_tolerance``, or whose minimum is
    not unique (a rival more than one disparity away scoring as well),
    are marked invalid. So are pixels near the left border whose winner is
    the largest disparity that stays on the image, since the true match may
    lie beyond it. Disparity 0 pixels stay in the map but are invalid
    as a disparity (non-positive).
    """
    L = np.asarray(left, dtype=np.float64)
    R = np.asarray(right, dtype=np.float64)
    if L.ndim == 2:
        L, R = L[None], R[None]
    if L.shape != R.shape:
        raise ValueError("left and right fields must have the same shape")
    W = L.shape[-1]
    if max_disp >= W:
        raise ValueError(f"max_disp={max_disp} must be below the width {W}")
    if block % 2 != 1:
        raise ValueError("block size must be odd")
    dl, ul = _winner(_sad_volume(L, R, max_disp, block, -1), uniqueness)
    dr, ur = _winner(_sad_volume(R, L, max_disp, block, +1), uniqueness)
    H = L.shape[1]
    xs = np.arange(W)[None, :].repeat(H, 0)
    target = xs - dl
    inside = target >= 0
    back = np.where(inside, dr[np.arange(H)[:, None], np.clip(target, 0, W - 1)], -10**6)
    consistent = inside & (np.abs(dl - back) <= lr_tolerance) & ul & ur[np.arange(H)[:, None], np.clip(target, 0, W - 1)]
    censored = (dl == xs) & (xs < max_disp)
    valid = consistent & (dl > 0) & ~censored
    return DisparityMap(dl.astype(np.float64), valid)

