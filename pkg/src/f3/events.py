"""Event data model, binary persistence, windowing and the V3/I3 baselines.

Timestamps are integer microseconds throughout. A stream is stored
column-wise (``t``, ``x``, ``y``, ``p``) rather than as a list of objects so
that windowing and discretization stay vectorized.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MAGIC = b"F3EV"
VERSION = 1
HEADER_DTYPE = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("width", "<u2"),
        ("height", "<u2"),
        ("reserved", "<u4"),
        ("count", "<u8"),
    ]
)
RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")]
)
DEFAULT_BIN_US = 1000


class EventFileError(Exception):
    """Base class for event-file failures. ``code`` is stable across releases."""

    code = "F3EV_ERROR"


class BadMagicError(EventFileError):
    code = "F3EV_BAD_MAGIC"


class UnsupportedVersionError(EventFileError):
    code = "F3EV_BAD_VERSION"


class TruncatedFileError(EventFileError):
    code = "F3EV_TRUNCATED"


class CoordinateError(EventFileError):
    code = "F3EV_COORDINATE"


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid sensor geometry {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events of one sensor."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    geometry: SensorGeometry

    @classmethod
    def from_arrays(cls, t, x, y, p, geometry: SensorGeometry, sort: bool = True) -> "EventStream":
        t = np.asarray(t)
        if t.dtype.kind == "f":
            t = np.floor(t)
        t = t.astype(np.int64)
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        p = np.where(np.asarray(p) >= 0, 1, -1).astype(np.int8)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event columns have different lengths")
        if len(t) and (t.min() < 0):
            raise ValueError("negative timestamp")
        _check_coords(x, y, geometry)
        if sort and len(t) and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        return cls(t, x, y, p, geometry)

    @classmethod
    def empty(cls, geometry: SensorGeometry) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0, dtype=np.int8), geometry)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def take(self, index) -> "EventStream":
        return EventStream(self.t[index], self.x[index], self.y[index], self.p[index], self.geometry)

    def time_slice(self, t0: int, t1: int) -> "EventStream":
        """Events with ``t0 <= t < t1``."""
        lo, hi = np.searchsorted(self.t, [t0, t1], side="left")
        return self.take(slice(lo, hi))

    @property
    def duration_us(self) -> int:
        return int(self.t[-1]) + 1 if len(self) else 0


def _check_coords(x, y, geometry: SensorGeometry) -> None:
    if len(x) == 0:
        return
    if x.min() < 0 or y.min() < 0 or x.max() >= geometry.width or y.max() >= geometry.height:
        raise CoordinateError(
            f"event coordinates outside {geometry.width}x{geometry.height} sensor"
        )


# -- persistence ---------------------------------------------------------


def write_events(path, stream: EventStream) -> None:
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["width"] = stream.geometry.width
    header["height"] = stream.geometry.height
    header["count"] = len(stream)
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_events(path) -> EventStream:
    """Load an ``F3EV`` file. Raises a subclass of :class:`EventFileError`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{os.fspath(path)}: not an F3EV file")
    if len(raw) < HEADER_DTYPE.itemsize:
        raise TruncatedFileError(f"{os.fspath(path)}: header truncated")
    header = np.frombuffer(raw, dtype=HEADER_DTYPE, count=1)[0]
    if int(header["version"]) != VERSION:
        raise UnsupportedVersionError(f"unsupported F3EV version {int(header['version'])}")
    geometry = SensorGeometry(int(header["width"]), int(header["height"]))
    count = int(header["count"])
    body = len(raw) - HEADER_DTYPE.itemsize
    if body != count * RECORD_DTYPE.itemsize:
        raise TruncatedFileError(
            f"{os.fspath(path)}: expected {count} records, found {body / RECORD_DTYPE.itemsize:g}"
        )
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, count=count, offset=HEADER_DTYPE.itemsize)
    t = rec["t"].astype(np.int64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    _check_coords(x, y, geometry)
    return EventStream(t, x, y, rec["p"].astype(np.int8), geometry)


# Field mapping for external recordings (HDF5 / ROS bags are not read here):
#   M3ED / DSEC  "events/t" (us, int64) -> t, "events/x" -> x, "events/y" -> y,
#   "events/p" (0/1) -> polarity (-1/+1). Offset t so the first event is at 0.
def convert_arrays(t, x, y, p, width: int, height: int, t_offset: int | None = None) -> EventStream:
    """Build a stream from raw dataset columns; polarity 0/1 is mapped to -1/+1."""
    t = np.asarray(t)
    if t_offset is None:
        t_offset = int(t.min()) if len(t) else 0
    p = np.asarray(p)
    pol = np.where(p > 0, 1, -1)
    return EventStream.from_arrays(t - t_offset, x, y, pol, SensorGeometry(width, height))


# -- windowing -----------------------------------------------------------


@dataclass(frozen=True)
class EventWindow:
    events: EventStream
    t_ref: int
    dt: int
    side: str = "past"
    bin_us: int = DEFAULT_BIN_US

    @property
    def geometry(self) -> SensorGeometry:
        return self.events.geometry

    @property
    def start(self) -> int:
        return self.t_ref - self.dt if self.side == "past" else self.t_ref

    @property
    def n_bins(self) -> int:
        return self.dt // self.bin_us


def window(stream: EventStream, t_ref: int, dt: int, side: str = "past",
           bin_us: int = DEFAULT_BIN_US) -> EventWindow:
    """Half-open window ``[t_ref-dt, t_ref)`` (past) or ``[t_ref, t_ref+dt)`` (future)."""
    if side not in ("past", "future"):
        raise ValueError(f"side must be 'past' or 'future', got {side!r}")
    t0 = t_ref - dt if side == "past" else t_ref
    return EventWindow(stream.time_slice(t0, t0 + dt), int(t_ref), int(dt), side, int(bin_us))


@dataclass(frozen=True)
class DiscreteEvents:
    """Distinct active (bin, pixel) entries of a window, sorted by (y, x, bin)."""

    bins: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    n_bins: int
    geometry: SensorGeometry = field(repr=False)

    def __len__(self) -> int:
        return len(self.bins)

    @property
    def pixel(self) -> np.ndarray:
        return self.y * self.geometry.width + self.x


def discretize(win: EventWindow) -> DiscreteEvents:
    """Collapse events sharing a (bin, pixel) cell; the last event's polarity wins."""
    if win.dt % win.bin_us:
        raise ValueError(f"bin_us={win.bin_us} does not divide dt={win.dt}")
    ev = win.events
    H, W = win.geometry.height, win.geometry.width
    n_bins = win.n_bins
    bins = (ev.t - win.start) // win.bin_us
    # (y, x, bin) ordering: per pixel the bins ascend, fixing the pooling sum order
    key = (ev.y * W + ev.x) * n_bins + bins
    # events are time-sorted, so the last occurrence of a key is the latest event
    rev = key[::-1]
    uniq, first_in_rev = np.unique(rev, return_index=True)
    last = len(key) - 1 - first_in_rev
    pix, b = np.divmod(uniq, n_bins)
    y, x = np.divmod(pix, W)
    return DiscreteEvents(b.astype(np.int64), x, y, ev.p[last].astype(np.int8), n_bins, win.geometry)


@dataclass(frozen=True)
class VoxelGrid:
    data: np.ndarray  # (n_bins, H, W)
    t_ref: int
    bin_us: int


@dataclass(frozen=True)
class EventFrames:
    data: np.ndarray  # (2, H, W); channel 0 positive, channel 1 negative


def to_voxel_grid(win: EventWindow, dtype=np.float32) -> VoxelGrid:
    d = discretize(win)
    grid = np.zeros((d.n_bins, *win.geometry.shape), dtype=dtype)
    grid[d.bins, d.y, d.x] = 1
    return VoxelGrid(grid, win.t_ref, win.bin_us)


def to_event_frames(win: EventWindow, dtype=np.float32) -> EventFrames:
    d = discretize(win)
    frames = np.zeros((2, *win.geometry.shape), dtype=dtype)
    ch = np.where(d.p > 0, 0, 1)
    frames[ch, d.y, d.x] = 1
    return EventFrames(frames)


def subsample(win: EventWindow, keep_fraction: float, seed) -> EventWindow:
    """Keep each event independently with probability ``keep_fraction``."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(win.events)) < keep_fraction
    return EventWindow(win.events.take(keep), win.t_ref, win.dt, win.side, win.bin_us)
