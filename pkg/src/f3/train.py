"""Self-supervised training of the feature field by predicting future events.

Torch autograd records the tape; the two ops specific to this model carry
hand-written backward passes: the hash-grid lookup (sparse, in
``hashgrid``) and the focal loss (below). The optimizer is a hand-written
AdamW that only touches hash-table rows that received gradient.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, module_sections, save_checkpoint
from .events import EventStream, discretize, subsample, to_voxel_grid, window
from .field import FeatureField, FeatureFieldModel, SmootherConfig
from .hashgrid import HashGridConfig


# -- predictor head ------------------------------------------------------


class PredictorHead(nn.Module):
    """One logit per future bin: ``logit[s, u] = w[s] . F(u) + b[s]``."""

    def __init__(self, n_bins: int, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_bins, channels))
        self.bias = nn.Parameter(torch.zeros(n_bins))

    def forward(self, field: torch.Tensor) -> torch.Tensor:
        """(B, p, H, W) -> logits (B, n_bins, H, W)."""
        return torch.einsum("sp,bphw->bshw", self.weight, field) + self.bias[None, :, None, None]


def predict_future(field: FeatureField | torch.Tensor, head: PredictorHead) -> torch.Tensor:
    """Event probabilities (n_bins, H, W) for one field, or (B, n_bins, H, W) for a batch."""
    data = torch.as_tensor(field.data if isinstance(field, FeatureField) else field)
    single = data.ndim == 3
    data = data[None] if single else data
    if data.shape[1] != head.weight.shape[1]:
        raise ValueError(f"field has {data.shape[1]} channels, head expects {head.weight.shape[1]}")
    out = torch.sigmoid(head(data.to(head.weight.dtype)))
    return out[0] if single else out


# -- focal loss ----------------------------------------------------------


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    alpha: float | None = None  # None: fraction of event voxels in the batch

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


def _check_binary(targets: torch.Tensor) -> None:
    if not torch.all((targets == 0) | (targets == 1)):
        raise ValueError("focal loss targets must be 0 or 1")


def _focal_terms(z, e, alpha, gamma):
    log_p = F.logsigmoid(z)
    log_q = F.logsigmoid(-z)  # log(1 - p) without cancellation
    p, q = torch.exp(log_p), torch.exp(log_q)
    pos = -alpha * e * q.pow(gamma) * log_p
    neg = -(1 - alpha) * (1 - e) * p.pow(gamma) * log_q
    return pos + neg, (p, q, log_p, log_q)


class FocalLossFunction(torch.autograd.Function):
    """Elementwise focal loss on logits with the analytic logit gradient.

    With p = sigmoid(z) and q = 1 - p:
      d/dz [-a q^g log p]        = -a q^g (q - g p log p)
      d/dz [-(1-a) p^g log q]    = -(1-a) p^g (g q log q - p)
    """

    @staticmethod
    def forward(ctx, z, e, alpha, gamma):
        loss, (p, q, log_p, log_q) = _focal_terms(z, e, alpha, gamma)
        ctx.save_for_backward(z, e)
        ctx.alpha, ctx.gamma = alpha, gamma
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        z, e = ctx.saved_tensors
        a, g = ctx.alpha, ctx.gamma
        log_p, log_q = F.logsigmoid(z), F.logsigmoid(-z)
        p, q = torch.exp(log_p), torch.exp(log_q)
        d_pos = -a * q.pow(g) * (q - g * p * log_p)
        d_neg = -(1 - a) * p.pow(g) * (g * q * log_q - p)
        return grad_out * (e * d_pos + (1 - e) * d_neg), None, None, None


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float | None = None,
               gamma: float = 2.0, reduction: str = "sum") -> torch.Tensor:
    """Class-weighted focal loss on logits.

    ``alpha=None`` uses the fraction of event voxels in ``targets``.
    ``reduction`` is "sum" (the training objective as written), "mean" or "none".
    """
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    _check_binary(targets)
    if alpha is None:
        alpha = event_fraction(targets)
    per = FocalLossFunction.apply(logits, targets, float(alpha), float(gamma))
    if reduction == "sum":
        return per.sum()
    if reduction == "mean":
        return per.mean()
    if reduction == "none":
        return per
    raise ValueError(f"unknown reduction {reduction!r}")


def focal_loss_probs(probs, targets, alpha: float, gamma: float = 2.0) -> np.ndarray:
    """Per-voxel loss written directly in probabilities (reference form)."""
    p = np.asarray(probs, dtype=np.float64)
    e = np.asarray(targets, dtype=np.float64)
    return -(alpha * e * (1 - p) ** gamma * np.log(p) + (1 - alpha) * (1 - e) * p**gamma * np.log1p(-p))


def event_fraction(targets: torch.Tensor, floor: float = 1e-6) -> float:
    """Fraction of voxels with an event, clipped into the open unit interval."""
    frac = float(targets.float().mean()) if targets.numel() else 0.0
    return min(max(frac, floor), 1.0 - floor)


# -- backward with diagnostics -------------------------------------------


class GradientError(RuntimeError):
    pass


def backward(loss: torch.Tensor, named_params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse pass; returns gradients by name (zeros for unreached parameters)."""
    if not loss.requires_grad:
        raise GradientError("loss is detached from every parameter")
    if not torch.isfinite(loss):
        raise GradientError(f"non-finite loss {float(loss.detach())} (op: loss)")
    params = list(named_params.values())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for (name, p), g in zip(named_params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


# -- optimizer -----------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decay_scaled_by_lr: bool = True


def linear_lr(step: int, total: int, start: float, end: float) -> float:
    """Linear interpolation from ``start`` (step 0) to ``end`` (last step)."""
    if total <= 1:
        return start
    f = min(max(step / (total - 1), 0.0), 1.0)
    return start + (end - start) * f


class ParameterStore:
    """Named parameters with AdamW moment buffers and a step counter.

    Parameters listed in ``sparse`` are hash tables of shape (L, T, F); their
    updates touch only rows passed in ``rows`` to :meth:`step`.
    """

    def __init__(self, params: dict[str, torch.Tensor], sparse=()):
        self.params = dict(params)
        self.sparse = set(sparse)
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.step_count = 0
        self._shapes = {k: tuple(v.shape) for k, v in self.params.items()}

    @classmethod
    def from_modules(cls, **modules) -> "ParameterStore":
        params, sparse = {}, []
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                key = f"{prefix}.{name}"
                params[key] = p
                if name == "tables":
                    sparse.append(key)
        return cls(params, sparse)

    def step(self, grads: dict[str, torch.Tensor], lr: float, config: OptimizerConfig,
             rows: dict[str, torch.Tensor] | None = None) -> None:
        optimizer_step(self, grads, lr, config, rows)

    def state(self) -> dict:
        return {"step": self.step_count, "params": {k: v.detach().clone() for k, v in self.params.items()}}


def optimizer_step(store: ParameterStore, grads: dict[str, torch.Tensor], lr: float,
                   config: OptimizerConfig, rows: dict[str, torch.Tensor] | None = None) -> None:
    """One AdamW update with decoupled decay.

    Decay multiplies parameters by ``1 - lr*wd`` (or ``1 - wd`` when
    ``decay_scaled_by_lr`` is off) and never enters the moment estimates.
    Hash tables are updated lazily: only rows in ``rows[name]`` (flat
    ``level*T + row`` indices) change, moments included.
    """
    b1, b2 = config.betas
    store.step_count += 1
    t = store.step_count
    c1, c2 = 1 - b1**t, 1 - b2**t
    shrink = 1 - (lr * config.weight_decay if config.decay_scaled_by_lr else config.weight_decay)
    rows = rows or {}
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if tuple(g.shape) != store._shapes[name]:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {store._shapes[name]}")
            m, v = store.m[name], store.v[name]
            if name in store.sparse:
                idx = rows.get(name)
                if idx is None:
                    continue
                fdim = p.shape[-1]
                pf, mf, vf, gf = p.view(-1, fdim), m.view(-1, fdim), v.view(-1, fdim), g.reshape(-1, fdim)
                gi = gf[idx]
                mi = mf[idx].mul_(b1).add_(gi, alpha=1 - b1)
                vi = vf[idx].mul_(b2).addcmul_(gi, gi, value=1 - b2)
                mf[idx], vf[idx] = mi, vi
                pi = pf[idx] * shrink
                pi -= lr * (mi / c1) / (torch.sqrt(vi / c2) + config.eps)
                pf[idx] = pi
            else:
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                p.mul_(shrink)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + config.eps))


# -- training loop -------------------------------------------------------


@dataclass
class TrainConfig:
    dt_us: int = 20000
    bin_us: int = 1000
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    gamma: float = 2.0
    alpha_override: float | None = None
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    weight_decay: float = 0.01
    steps: int = 2000
    batch: int = 8
    dropout_keep: float = 1.0
    seed: int = 0
    deterministic: bool = True
    reduction: str = "mean"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_every: int = 0

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = HashGridConfig(**self.grid)
        if isinstance(self.smoother, dict):
            self.smoother = SmootherConfig(**self.smoother)
        if self.dt_us % self.bin_us:
            raise ValueError("bin_us must divide dt_us")

    @property
    def n_bins(self) -> int:
        return self.dt_us // self.bin_us

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {unknown}")
        return cls(**d)


@dataclass
class TrainResult:
    model: FeatureFieldModel
    head: PredictorHead
    store: ParameterStore
    losses: list[float]
    alphas: list[float]
    seconds: float = 0.0


def set_determinism(flag: bool, threads: int | None = None) -> None:
    torch.use_deterministic_algorithms(flag)
    if threads is not None:
        torch.set_num_threads(threads)


def window_pairs(stream: EventStream, dt_us: int, bin_us: int) -> np.ndarray:
    """Reference times t (multiples of bin_us) with full past and future windows."""
    last = stream.duration_us - dt_us
    if last < dt_us:
        return np.zeros(0, dtype=np.int64)
    return np.arange(dt_us, last + 1, bin_us, dtype=np.int64)


def build_batch(stream: EventStream, t_refs, dt_us: int, bin_us: int, keep: float, rng):
    """Past windows (input dropout applied) and binary future voxel targets."""
    inputs, targets = [], []
    for t in t_refs:
        past = window(stream, int(t), dt_us, "past", bin_us)
        if keep < 1.0:
            past = subsample(past, keep, rng)
        inputs.append(discretize(past))
        targets.append(to_voxel_grid(window(stream, int(t), dt_us, "future", bin_us)).data)
    return inputs, torch.from_numpy(np.stack(targets))


def make_model(config: TrainConfig, geometry) -> tuple[FeatureFieldModel, PredictorHead]:
    grid = dataclasses.replace(config.grid, extent=(geometry.height, geometry.width, config.n_bins))
    model = FeatureFieldModel(grid, config.smoother, seed=config.seed)
    head = PredictorHead(config.n_bins, config.smoother.channels)
    return model, head


def train_f3(stream: EventStream, config: TrainConfig, callback=None) -> TrainResult:
    """Fit hash tables, smoother and head on (past, future) window pairs of ``stream``."""
    t_refs = window_pairs(stream, config.dt_us, config.bin_us)
    if len(t_refs) == 0:
        raise ValueError("stream too short for a single (past, future) window pair")
    if config.deterministic:
        set_determinism(True)
    model, head = make_model(config, stream.geometry)
    store = ParameterStore.from_modules(f3=model, head=head)
    opt = OptimizerConfig(config.lr_start, config.lr_end, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    losses, alphas = [], []
    start = time.perf_counter()
    for step in range(config.steps):
        if len(order) < config.batch:
            order.extend(rng.permutation(len(t_refs)).tolist())
        idx, order = order[:config.batch], order[config.batch:]
        inputs, targets = build_batch(stream, t_refs[idx], config.dt_us, config.bin_us,
                                      config.dropout_keep, rng)
        alpha = config.alpha_override if config.alpha_override is not None else event_fraction(targets)
        logits = head(model(inputs))
        loss = focal_loss(logits, targets, alpha, config.gamma, config.reduction)
        grads = backward(loss, store.params)
        lvl, row = model.last_touched.entries()
        rows = {"f3.tables": lvl * model.grid.table_size + row}
        lr = linear_lr(step, config.steps, config.lr_start, config.lr_end)
        optimizer_step(store, grads, lr, opt, rows)
        losses.append(float(loss.detach()))
        alphas.append(float(alpha))
        if callback is not None:
            callback(step, float(loss))
        if config.checkpoint_every and config.checkpoint_path and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, to_checkpoint(model, head, config))
    res = TrainResult(model, head, store, losses, alphas, time.perf_counter() - start)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, to_checkpoint(model, head, config))
    return res


def to_checkpoint(model: FeatureFieldModel, head: PredictorHead, config: TrainConfig,
                  extra: dict | None = None) -> Checkpoint:
    cfg = {"train": config.to_dict(), "grid": dataclasses.asdict(model.grid)}
    sections = module_sections(model, "f3.")
    sections.update(module_sections(head, "head."))
    for k, v in (extra or {}).items():
        sections[k] = v
    return Checkpoint(json.loads(json.dumps(cfg)), sections)
