"""Sum-pooled hash features per pixel followed by a convolutional smoother.

``pool`` is the permutation-invariant part: every active (bin, pixel) entry
is encoded and the encodings are summed per pixel. ``smooth`` turns the
sparse pooled map into a dense p-channel image with a stack of ConvNeXt-V2
style residual units.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .events import DiscreteEvents, EventWindow, SensorGeometry, discretize
from .hashgrid import HashGridConfig, encode, encode_autograd, init_tables


@dataclass
class SmootherConfig:
    """Six single-stage 7x7 units give the 37x37 receptive field (1 + 6*6)."""

    blocks: int = 6
    kernel: int = 7
    channels: int = 32
    expansion: int = 4
    grn: bool = True
    receptive_field: int | None = 37

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.receptive_field is not None and self.receptive_field != self.computed_receptive_field:
            raise ValueError(
                f"{self.blocks} blocks of {self.kernel}x{self.kernel} give a "
                f"{self.computed_receptive_field}px receptive field, not {self.receptive_field}"
            )

    @property
    def computed_receptive_field(self) -> int:
        return 1 + self.blocks * (self.kernel - 1)


@dataclass
class PooledFeature:
    """Sparse per-pixel sums: ``values[i]`` belongs to flat pixel ``pixels[i]``."""

    pixels: np.ndarray
    values: torch.Tensor
    geometry: SensorGeometry

    def dense(self) -> torch.Tensor:
        H, W = self.geometry.height, self.geometry.width
        out = torch.zeros((self.values.shape[1], H * W), dtype=self.values.dtype)
        out[:, torch.from_numpy(self.pixels)] = self.values.T
        return out.view(-1, H, W)


@dataclass
class FeatureField:
    data: np.ndarray  # (p, H, W)
    t_ref: int = 0


class DepthwiseConvFunction(torch.autograd.Function):
    """Stride-1 'same' depthwise convolution with a fast weight gradient.

    The weight gradient is a correlation of input and upstream gradient per
    (batch, channel) plane, run as one grouped convolution and summed over
    the batch.
    """

    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2, groups=x.shape[1])

    @staticmethod
    def backward(ctx, g):
        x, weight = ctx.saved_tensors
        B, C, H, W = x.shape
        k = weight.shape[-1]
        pad = k // 2
        gx = F.conv2d(g, weight.flip(-1, -2), padding=pad, groups=C)
        xp = F.pad(x, (pad, pad, pad, pad)).reshape(1, B * C, H + 2 * pad, W + 2 * pad)
        gw = F.conv2d(xp, g.reshape(B * C, 1, H, W), groups=B * C)
        gw = gw.view(B, C, k, k).sum(0)[:, None]
        return gx, gw, g.sum(dim=(0, 2, 3))


class DepthwiseConv2d(nn.Module):
    """Per-channel k x k convolution with zero padding."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        ref = nn.Conv2d(channels, channels, kernel, groups=channels)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.kernel_size = (kernel, kernel)

    def forward(self, x):
        return DepthwiseConvFunction.apply(x, self.weight, self.bias)


class PointwiseFunction(torch.autograd.Function):
    """1x1 convolution on (B, C, N) planes as batched matmuls."""

    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        return torch.baddbmm(bias[None, :, None].expand(x.shape[0], -1, x.shape[2]),
                             weight.expand(x.shape[0], -1, -1), x)

    @staticmethod
    def backward(ctx, g):
        x, weight = ctx.saved_tensors
        gx = torch.bmm(weight.T.expand(g.shape[0], -1, -1), g)
        gw = torch.bmm(g, x.transpose(1, 2)).sum(0)
        return gx, gw, g.sum(dim=(0, 2))


class Pointwise(nn.Module):
    """1x1 convolution as a channel matmul."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        ref = nn.Conv2d(c_in, c_out, 1)
        self.weight = nn.Parameter(ref.weight.detach()[:, :, 0, 0].clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())

    def forward(self, x):
        B, C, H, W = x.shape
        y = PointwiseFunction.apply(x.reshape(B, C, H * W), self.weight, self.bias)
        return y.view(B, -1, H, W)


class LayerNorm2d(nn.Module):
    """Normalization over channels at every pixel independently."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):  # (B, C, H, W)
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        xn = (x - mu) / torch.sqrt(var + self.eps)
        return xn * self.weight[:, None, None] + self.bias[:, None, None]


class GRN(nn.Module):
    """Global response normalization: per-channel L2 energy over the frame,
    divided by its channel mean, rescales the response."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):  # (B, C, H, W)
        g = torch.sqrt(x.pow(2).sum(dim=(2, 3), keepdim=True) + self.eps**2)
        n = g / (g.mean(dim=1, keepdim=True) + self.eps)
        return self.gamma[:, None, None] * (x * n) + self.beta[:, None, None] + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, expansion: int = 4, grn: bool = True):
        super().__init__()
        hidden = channels * expansion
        self.dw = DepthwiseConv2d(channels, kernel)
        self.norm = LayerNorm2d(channels)
        self.pw1 = Pointwise(channels, hidden)
        self.grn = GRN(hidden) if grn else nn.Identity()
        self.pw2 = Pointwise(hidden, channels)

    def forward(self, x):
        y = self.dw(x)
        y = self.norm(y)
        y = F.gelu(self.pw1(y))
        y = self.grn(y)
        return x + self.pw2(y)


class Smoother(nn.Module):
    """Input projection n -> p, then residual ConvNeXt units with zero padding."""

    def __init__(self, n_in: int, config: SmootherConfig):
        super().__init__()
        self.config = config
        self.stem = Pointwise(n_in, config.channels)
        self.blocks = nn.ModuleList(
            ConvNeXtBlock(config.channels, config.kernel, config.expansion, config.grn)
            for _ in range(config.blocks)
        )

    def forward(self, x):
        x = self.stem(x)
        for blk in self.blocks:
            x = blk(x)
        return x


def identity_init(smoother: Smoother) -> None:
    """Delta depthwise kernels and zeroed residual branches: the stack reduces to the stem."""
    with torch.no_grad():
        for blk in smoother.blocks:
            blk.dw.weight.zero_()
            c = blk.dw.kernel_size[0] // 2
            blk.dw.weight[:, :, c, c] = 1.0
            blk.dw.bias.zero_()
            blk.pw2.weight.zero_()
            blk.pw2.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class FeatureFieldModel(nn.Module):
    """Learnable hash tables plus smoother. ``forward`` maps a batch of
    discretized windows to a (B, p, H, W) field."""

    def __init__(self, grid: HashGridConfig, smoother: SmootherConfig, seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.grid = grid
        self.smoother_config = smoother
        gen = torch.Generator().manual_seed(seed)
        self.tables = nn.Parameter(init_tables(grid, gen, dtype=dtype))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.smoother = Smoother(grid.n_features, smoother).to(dtype)
        self.last_touched = None

    @property
    def geometry_shape(self) -> tuple[int, int]:
        return self.grid.extent[0], self.grid.extent[1]

    def pooled_dense(self, batch: list[DiscreteEvents]) -> torch.Tensor:
        H, W = self.geometry_shape
        n = self.grid.n_features
        coords, flat = [], []
        for b, d in enumerate(batch):
            coords.append(np.stack([d.bins, d.y, d.x], axis=1))
            flat.append(b * H * W + d.pixel)
        coords = torch.from_numpy(np.concatenate(coords).astype(np.float64)) if coords else torch.zeros((0, 3))
        flat = torch.from_numpy(np.concatenate(flat)) if flat else torch.zeros(0, dtype=torch.long)
        feats, touched = encode_autograd(coords, self.tables, self.grid)
        self.last_touched = touched
        out = torch.zeros((len(batch) * H * W, n), dtype=self.tables.dtype)
        out = out.index_add(0, flat, feats)
        return out.view(len(batch), H, W, n).permute(0, 3, 1, 2)

    def forward(self, batch: list[DiscreteEvents]) -> torch.Tensor:
        return self.smoother(self.pooled_dense(batch))


def _as_discrete(win) -> DiscreteEvents:
    return win if isinstance(win, DiscreteEvents) else discretize(win)


def pool(win: EventWindow | DiscreteEvents, tables: torch.Tensor, config: HashGridConfig) -> PooledFeature:
    """Per-pixel sum of the encodings of its active bins, summed in bin order."""
    d = _as_discrete(win)
    if len(d) == 0:
        return PooledFeature(np.zeros(0, dtype=np.int64),
                             torch.zeros((0, config.n_features), dtype=tables.dtype), d.geometry)
    coords = torch.from_numpy(np.stack([d.bins, d.y, d.x], axis=1).astype(np.float64))
    with torch.no_grad():
        feats, _ = encode(coords, tables, config)
    pixels, inverse = np.unique(d.pixel, return_inverse=True)
    values = torch.zeros((len(pixels), feats.shape[1]), dtype=feats.dtype)
    values.index_add_(0, torch.from_numpy(inverse.reshape(-1)), feats)
    return PooledFeature(pixels, values, d.geometry)


def smooth(pooled: PooledFeature, smoother: Smoother) -> FeatureField:
    for name, p in smoother.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"non-finite smoother parameter {name}")
    with torch.no_grad():
        dense = pooled.dense().to(next(smoother.parameters()).dtype)
        out = smoother(dense[None])[0]
    return FeatureField(out.numpy())


def featurize(win: EventWindow | DiscreteEvents, model: FeatureFieldModel) -> FeatureField:
    """F3 of one window: ``smooth(pool(window))``."""
    d = _as_discrete(win)
    ff = smooth(pool(d, model.tables.detach(), model.grid), model.smoother)
    if isinstance(win, EventWindow):
        ff.t_ref = win.t_ref
    return ff


def featurize_batch(windows, model: FeatureFieldModel) -> torch.Tensor:
    with torch.no_grad():
        return model([_as_discrete(w) for w in windows])


def pca_project(ff: FeatureField | np.ndarray, k: int = 3) -> np.ndarray:
    """Project a (p, H, W) field onto its top-k principal components -> (k, H, W).

    Components are ordered by decreasing eigenvalue and signed so that each
    eigenvector's largest-magnitude loading is positive. Components with a
    (numerically) zero eigenvalue are returned as zeros.
    """
    data = ff.data if isinstance(ff, FeatureField) else np.asarray(ff)
    p, H, W = data.shape
    if k > p:
        raise ValueError(f"k={k} exceeds channel count {p}")
    X = data.reshape(p, -1).T.astype(np.float64)
    X = X - X.mean(axis=0)
    cov = X.T @ X / max(len(X), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, evecs = evals[order], evecs[:, order]
    lead = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[lead, np.arange(k)])
    proj = X @ evecs
    tol = max(evals.max(initial=0.0), 0.0) * 1e-12
    proj[:, evals <= tol] = 0.0
    return proj.T.reshape(k, H, W)


# -- F3FF tensor container -----------------------------------------------

FF_MAGIC = b"F3FF"
FF_VERSION = 1
MODE_FEATURE = 0
MODE_DISPARITY = 1
_FF_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("mode", "<u2"),
                       ("p", "<u4"), ("height", "<u4"), ("width", "<u4")])


def write_tensor(path, data: np.ndarray, mode: int = MODE_FEATURE) -> None:
    """Write a (p, H, W) float32 tensor. Disparity maps use two channels: value, validity."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise ValueError("expected a (p, H, W) tensor")
    header = np.zeros(1, dtype=_FF_HEADER)
    header[0] = (FF_MAGIC, FF_VERSION, mode, *data.shape)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(data.tobytes())


def read_tensor(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FF_MAGIC:
        raise ValueError(f"{path}: not an F3FF file")
    header = np.frombuffer(raw, dtype=_FF_HEADER, count=1)[0]
    if int(header["version"]) != FF_VERSION:
        raise ValueError(f"unsupported F3FF version {int(header['version'])}")
    shape = (int(header["p"]), int(header["height"]), int(header["width"]))
    n = int(np.prod(shape))
    if len(raw) != _FF_HEADER.itemsize + 4 * n:
        raise ValueError(f"{path}: size does not match header")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_FF_HEADER.itemsize).reshape(shape)
    return data.copy(), int(header["mode"])


def write_field(path, ff: FeatureField) -> None:
    write_tensor(path, ff.data, MODE_FEATURE)


def read_field(path) -> FeatureField:
    data, mode = read_tensor(path)
    if mode != MODE_FEATURE:
        raise ValueError(f"{path}: holds a disparity map, not a feature field")
    return FeatureField(data)
