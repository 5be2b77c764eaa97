"""Synthetic event streams and ground-truth motion fields.

Scenes are sets of moving 2-D shapes. Every (bin, pixel) voxel covered by a
shape fires independently with probability ``mu``; voxels outside all shapes
only fire through the optional uniform background noise.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .events import DEFAULT_BIN_US, EventStream, SensorGeometry

FLOW_MAGIC = b"F3FL"


@dataclass
class Surface:
    """A shape translating across the image plane.

    ``center`` is in pixels at ``lifetime[0]``; ``velocity`` in px/ms. For
    ``rect`` the size is (width, height), for ``disk`` it is (radius,).
    """

    shape: str
    center: tuple[float, float]
    size: tuple[float, ...]
    velocity: tuple[float, float] = (0.0, 0.0)
    lifetime: tuple[int, int] = (0, 2**62)

    def __post_init__(self):
        if self.shape not in ("rect", "disk"):
            raise ValueError(f"unknown surface shape {self.shape!r}")

    def mask(self, t_us: float, H: int, W: int) -> tuple[slice, slice, np.ndarray] | None:
        """Covered pixels at time ``t_us`` as (row slice, col slice, boolean patch)."""
        if not (self.lifetime[0] <= t_us < self.lifetime[1]):
            return None
        dt_ms = (t_us - self.lifetime[0]) / 1000.0
        cx = self.center[0] + self.velocity[0] * dt_ms
        cy = self.center[1] + self.velocity[1] * dt_ms
        if self.shape == "rect":
            hw, hh = self.size[0] / 2.0, self.size[1] / 2.0
        else:
            hw = hh = self.size[0]
        # pixel k covers [k, k+1); it is inside when its centre k+0.5 is
        x0 = max(int(np.ceil(cx - hw - 0.5)), 0)
        x1 = min(int(np.ceil(cx + hw - 0.5)), W)
        y0 = max(int(np.ceil(cy - hh - 0.5)), 0)
        y1 = min(int(np.ceil(cy + hh - 0.5)), H)
        if x0 >= x1 or y0 >= y1:
            return None
        if self.shape == "rect":
            patch = np.ones((y1 - y0, x1 - x0), dtype=bool)
        else:
            yy = np.arange(y0, y1)[:, None] + 0.5 - cy
            xx = np.arange(x0, x1)[None, :] + 0.5 - cx
            patch = yy**2 + xx**2 < self.size[0] ** 2
        return slice(y0, y1), slice(x0, x1), patch


@dataclass
class SceneSpec:
    surfaces: list[Surface]
    mu: float
    width: int
    height: int
    duration_us: int
    bin_us: int = DEFAULT_BIN_US
    noise_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        self.surfaces = [s if isinstance(s, Surface) else Surface(**s) for s in self.surfaces]

    @property
    def geometry(self) -> SensorGeometry:
        return SensorGeometry(self.width, self.height)

    @property
    def n_bins(self) -> int:
        return self.duration_us // self.bin_us

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        data = json.loads(text)
        allowed = {"surfaces", "mu", "width", "height", "duration_us", "bin_us", "noise_rate"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        data["surfaces"] = [
            Surface(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
            for s in data["surfaces"]
        ]
        return cls(**data)


def _surface_arrays(scene: SceneSpec):
    cache = getattr(scene, "_arrays", None)
    if cache is not None and cache[0] == len(scene.surfaces):
        return cache[1]
    S = scene.surfaces
    arr = dict(
        cx=np.array([s.center[0] for s in S], float),
        cy=np.array([s.center[1] for s in S], float),
        vx=np.array([s.velocity[0] for s in S], float),
        vy=np.array([s.velocity[1] for s in S], float),
        hw=np.array([s.size[0] / 2.0 if s.shape == "rect" else s.size[0] for s in S], float),
        hh=np.array([s.size[1] / 2.0 if s.shape == "rect" else s.size[0] for s in S], float),
        t0=np.array([s.lifetime[0] for s in S], float),
        t1=np.array([s.lifetime[1] for s in S], float),
    )
    object.__setattr__(scene, "_arrays", (len(S), arr))
    return arr


def surface_labels(scene: SceneSpec, bin_index: int) -> np.ndarray:
    """Label image (0 = background, k = surface k-1) at the centre of a bin.

    Raises ``ValueError`` if two surfaces claim the same pixel.
    """
    H, W = scene.height, scene.width
    labels = np.zeros((H, W), dtype=np.int32)
    if not scene.surfaces:
        return labels
    t_mid = (bin_index + 0.5) * scene.bin_us
    a = _surface_arrays(scene)
    dt_ms = (t_mid - a["t0"]) / 1000.0
    cx = a["cx"] + a["vx"] * dt_ms
    cy = a["cy"] + a["vy"] * dt_ms
    visible = ((a["t0"] <= t_mid) & (t_mid < a["t1"])
               & (cx + a["hw"] > 0) & (cx - a["hw"] < W)
               & (cy + a["hh"] > 0) & (cy - a["hh"] < H))
    for k in np.flatnonzero(visible):
        m = scene.surfaces[k].mask(t_mid, H, W)
        if m is None:
            continue
        rs, cs, patch = m
        region = labels[rs, cs]
        if np.any(region[patch] != 0):
            raise ValueError(f"surfaces overlap at bin {bin_index}")
        region[patch] = k + 1
    return labels


def surface_voxels(scene: SceneSpec) -> np.ndarray:
    """Boolean occupancy (n_bins, H, W) of the union of surfaces."""
    out = np.zeros((scene.n_bins, scene.height, scene.width), dtype=bool)
    for b in range(scene.n_bins):
        out[b] = surface_labels(scene, b) > 0
    return out


def generate_events(scene: SceneSpec, seed) -> EventStream:
    """Sample one realization of the Bernoulli surface model."""
    rng = np.random.default_rng(seed)
    occ = surface_voxels(scene)
    fire = occ & (rng.random(occ.shape) < scene.mu)
    if scene.noise_rate > 0:
        fire |= rng.random(occ.shape) < scene.noise_rate
    b, y, x = np.nonzero(fire)
    t = b * scene.bin_us + rng.integers(0, scene.bin_us, size=len(b))
    p = np.where(rng.random(len(b)) < 0.5, 1, -1)
    return EventStream.from_arrays(t, x, y, p, scene.geometry)


def translating_texture(width: int, height: int, duration_us: int, velocity: tuple[float, float],
                        mu: float, seed, density: float = 0.25, sizes=(1.0, 3.0),
                        noise_fraction: float = 0.0, bin_us: int = DEFAULT_BIN_US) -> SceneSpec:
    """A random field of small non-overlapping rectangles moving with a common velocity.

    ``noise_fraction`` sets the background rate so that noise events are that
    fraction of the expected total.
    """
    rng = np.random.default_rng(seed)
    span_ms = duration_us / 1000.0
    dx, dy = velocity[0] * span_ms, velocity[1] * span_ms
    # canvas covering every position the frame sees over the whole duration
    x_lo, x_hi = min(0.0, -dx) - 4, max(width, width - dx) + 4
    y_lo, y_hi = min(0.0, -dy) - 4, max(height, height - dy) + 4
    area = (x_hi - x_lo) * (y_hi - y_lo)
    occupied = np.zeros((int(np.ceil(y_hi - y_lo)) + 8, int(np.ceil(x_hi - x_lo)) + 8), dtype=bool)
    surfaces = []
    target = density * area
    covered, attempts = 0.0, 0
    while covered < target and attempts < 200000:
        attempts += 1
        w, h = (int(v) for v in rng.integers(int(sizes[0]), int(sizes[1]) + 1, size=2))
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(y_lo, y_hi)
        # integer-aligned corners keep the rasterization of every shape identical over time
        x0 = int(np.floor(cx - x_lo)) + 4
        y0 = int(np.floor(cy - y_lo)) + 4
        if x0 + w + 1 > occupied.shape[1] or y0 + h + 1 > occupied.shape[0]:
            continue
        if occupied[y0 - 1:y0 + h + 1, x0 - 1:x0 + w + 1].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        surfaces.append(Surface("rect", (x0 - 4 + x_lo + w / 2.0, y0 - 4 + y_lo + h / 2.0),
                                (float(w), float(h)), tuple(velocity), (0, 2**62)))
        covered += w * h
    scene = SceneSpec(surfaces, mu, width, height, duration_us, bin_us)
    if noise_fraction > 0:
        frac_on = surface_voxels(scene).mean()
        signal = frac_on * mu
        scene.noise_rate = float(signal * noise_fraction / (1.0 - noise_fraction))
    return scene


def uniform_flow(velocity: tuple[float, float], dt_us: int, height: int, width: int) -> "FlowField":
    """Ground truth for a translating texture: displacement over ``dt_us`` everywhere."""
    v = np.empty((2, height, width), dtype=np.float64)
    v[0] = velocity[0] * dt_us / 1000.0
    v[1] = velocity[1] * dt_us / 1000.0
    return FlowField(v, np.ones((height, width), dtype=bool))


# -- poses and motion field ---------------------------------------------


@dataclass
class PoseTrajectory:
    """Camera-to-world poses: ``R`` (n, 3, 3), ``p`` (n, 3) metres, ``t`` (n,) microseconds."""

    t: np.ndarray
    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")
        gram = np.einsum("nji,njk->nik", self.R, self.R)
        if not np.allclose(gram, np.eye(3), atol=1e-6) or not np.allclose(np.linalg.det(self.R), 1.0, atol=1e-6):
            raise ValueError("rotation matrices must be orthonormal with det = +1")


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class DepthMap:
    Z: np.ndarray
    intrinsics: Intrinsics
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.Z) & (self.Z > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.Z) & (self.Z > 0)


@dataclass
class Velocities:
    t: np.ndarray        # (n-1,) microseconds, start of each interval
    linear: np.ndarray   # (n-1, 3) m/s
    angular: np.ndarray  # (n-1, 3) rad/s


@dataclass
class FlowField:
    v: np.ndarray  # (2, H, W) pixel displacement (dx, dy)
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.v), axis=0)


def moving_average(x: np.ndarray, points: int) -> np.ndarray:
    """Centred moving average along axis 0; the window is truncated at the ends."""
    if points <= 1 or len(x) == 0:
        return x.copy()
    n = len(x)
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(n) - points // 2, 0, n)
    hi = np.clip(lo + points, 0, n)
    lo = np.clip(hi - points, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def velocities_from_poses(traj: PoseTrajectory, smoothing_points: int = 10,
                          body_frame: bool = False) -> Velocities:
    """Finite-difference linear and angular velocities, then moving-average smoothed.

    The linear velocity is the world-frame difference of positions; pass
    ``body_frame=True`` to express it in the camera frame at the start of each
    interval. The angular velocity always comes from ``log(R_t^T R_{t+dt})``
    and is therefore a body-frame quantity.
    """
    if len(traj.t) < 2:
        raise ValueError("need at least two poses")
    dt_s = np.diff(traj.t) / 1e6
    lin = np.diff(traj.p, axis=0) / dt_s[:, None]
    if body_frame:
        lin = np.einsum("nji,nj->ni", traj.R[:-1], lin)
    rel = np.einsum("nji,njk->nik", traj.R[:-1], traj.R[1:])
    ang = Rotation.from_matrix(rel).as_rotvec() / dt_s[:, None]
    return Velocities(traj.t[:-1].copy(), moving_average(lin, smoothing_points),
                      moving_average(ang, smoothing_points))


def interaction_matrix(u1: np.ndarray, u2: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Image-motion Jacobian (..., 2, 6) for normalized coords and depth."""
    inv = 1.0 / Z
    zeros = np.zeros_like(u1)
    row1 = np.stack([-inv, zeros, u1 * inv, u1 * u2, -(1 + u1**2), u2], axis=-1)
    row2 = np.stack([zeros, -inv, u2 * inv, 1 + u2**2, -u1 * u2, -u1], axis=-1)
    return np.stack([row1, row2], axis=-2)


def ego_motion_field(linear, angular, depth: DepthMap, dt_us: float) -> FlowField:
    """Pixel displacement over ``dt_us`` induced by camera motion (camera-frame velocities)."""
    K = depth.intrinsics
    H, W = depth.Z.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    u1 = (xs - K.cx) / K.fx
    u2 = (ys - K.cy) / K.fy
    Z = np.where(depth.valid, depth.Z, 1.0)
    L = interaction_matrix(u1, u2, Z)
    twist = np.concatenate([np.asarray(linear, float), np.asarray(angular, float)])
    udot = L @ twist
    dt_s = dt_us / 1e6
    v = np.stack([udot[..., 0] * K.fx * dt_s, udot[..., 1] * K.fy * dt_s])
    v[:, ~depth.valid] = 0.0
    return FlowField(v, depth.valid.copy())


def reprojection_flow(R1: np.ndarray, p1: np.ndarray, depth: DepthMap) -> FlowField:
    """Brute-force displacement of each pixel's 3-D point when the camera moves
    from the identity pose to camera-to-world pose (R1, p1)."""
    K = depth.intrinsics
    H, W = depth.Z.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    Z = np.where(depth.valid, depth.Z, 1.0)
    X = np.stack([(xs - K.cx) / K.fx * Z, (ys - K.cy) / K.fy * Z, Z], axis=-1)
    Xc = (X - p1) @ R1  # R1^T (X - p1) applied row-wise
    px = Xc[..., 0] / Xc[..., 2] * K.fx + K.cx
    py = Xc[..., 1] / Xc[..., 2] * K.fy + K.cy
    v = np.stack([px - xs, py - ys])
    v[:, ~depth.valid] = 0.0
    return FlowField(v, depth.valid.copy())


def write_flow(path, flow: FlowField) -> None:
    H, W = flow.v.shape[1:]
    header = np.zeros(1, dtype=[("magic", "S4"), ("version", "<u2"), ("height", "<u4"), ("width", "<u4")])
    header["magic"] = FLOW_MAGIC
    header["version"] = 1
    header["height"] = H
    header["width"] = W
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not an F3FL file")
    H = int(np.frombuffer(raw, "<u4", 1, 6)[0])
    W = int(np.frombuffer(raw, "<u4", 1, 10)[0])
    off = 14
    n = 2 * H * W
    if len(raw) != off + 4 * n + H * W:
        raise ValueError(f"{path}: truncated F3FL file")
    v = np.frombuffer(raw, "<f4", n, off).reshape(2, H, W).astype(np.float64)
    valid = np.frombuffer(raw, np.uint8, H * W, off + 4 * n).reshape(H, W).astype(bool)
    return FlowField(v, valid)


def check_velocity(scene: SceneSpec) -> tuple[float, float]:
    """Common velocity of all surfaces, warning if they disagree."""
    vels = {tuple(s.velocity) for s in scene.surfaces}
    if len(vels) > 1:
        warnings.warn("surfaces move with different velocities; returning the first")
    return next(iter(vels)) if vels else (0.0, 0.0)
