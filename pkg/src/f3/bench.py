"""Featurization latency and throughput measurement (reported, never asserted)."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np
import torch

from .events import EventStream, SensorGeometry, discretize, window
from .field import FeatureFieldModel, SmootherConfig, pool, smooth
from .hashgrid import HashGridConfig, encode


@dataclass
class BenchReport:
    events_per_second: float
    latency_ms: dict
    stages_ms: dict
    threads: int
    geometry: tuple[int, int]
    events: int
    active_voxels: int
    repeats: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def synthetic_stream(count: int, geometry: SensorGeometry, dt_us: int, seed: int = 0) -> EventStream:
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, dt_us, count))
    x = rng.integers(0, geometry.width, count)
    y = rng.integers(0, geometry.height, count)
    p = rng.choice([-1, 1], count)
    return EventStream.from_arrays(t, x, y, p, geometry)


def percentiles(samples_ms) -> dict:
    p50, p95, p99 = np.percentile(np.asarray(samples_ms), [50, 95, 99])
    return {"p50": float(p50), "p95": float(p95), "p99": float(p99)}


def run_bench(count: int = 200_000, height: int = 720, width: int = 1280, dt_us: int = 20_000,
              bin_us: int = 1000, repeats: int = 5, seed: int = 0,
              smoother: SmootherConfig | None = None, stream: EventStream | None = None) -> BenchReport:
    """Time encode, pool and smooth on one window of ``count`` random events.

    With ``stream`` given, its first ``dt_us`` window is timed instead and
    ``count``, ``height`` and ``width`` come from the stream.
    """
    if stream is None:
        stream = synthetic_stream(count, SensorGeometry(width, height), dt_us, seed)
    else:
        height, width = stream.geometry.shape
        stream = stream.time_slice(0, dt_us)
        count = len(stream)
    grid = HashGridConfig(extent=(height, width, dt_us // bin_us))
    model = FeatureFieldModel(grid, smoother or SmootherConfig(), seed=seed)
    win = window(stream, dt_us, dt_us, "past", bin_us)
    tables = model.tables.detach()
    stage = {"discretize": [], "encode": [], "pool": [], "smooth": []}
    total = []
    with torch.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            d = discretize(win)
            t1 = time.perf_counter()
            coords = torch.from_numpy(np.stack([d.bins, d.y, d.x], axis=1).astype(np.float64))
            encode(coords, tables, grid)
            t2 = time.perf_counter()
            pooled = pool(d, tables, grid)
            t3 = time.perf_counter()
            smooth(pooled, model.smoother)
            t4 = time.perf_counter()
            stage["discretize"].append((t1 - t0) * 1e3)
            stage["encode"].append((t2 - t1) * 1e3)
            # pool re-encodes internally; its own cost is the difference
            stage["pool"].append(max((t3 - t2) - (t2 - t1), 0.0) * 1e3)
            stage["smooth"].append((t4 - t3) * 1e3)
            total.append((t1 - t0 + t4 - t2) * 1e3)
    lat = percentiles(total)
    return BenchReport(
        events_per_second=float(count / (lat["p50"] / 1e3)),
        latency_ms=lat,
        stages_ms={k: percentiles(v) for k, v in stage.items()},
        threads=torch.get_num_threads(),
        geometry=(height, width),
        events=count,
        active_voxels=len(d),
        repeats=repeats,
    )
