"""Pinhole cameras, ray generation, depth sampling and volume compositing.

Camera convention: right-handed, the camera looks down -z with +y up and +x
right. Pixel ``(row, col)`` has its center at image coordinates
``(x=col, y=row)``, so a principal point ``(cx, cy)`` landing on an integer
pixel maps that pixel onto the optical axis.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nerfcl import kernels
from nerfcl.errors import DomainError, ProtocolError
from nerfcl.field import FieldParams, field_backward, field_forward

SOURCES = ("new", "experience_replay", "generative_replay")
DEFAULT_SAMPLES = 64


def rotation_from_axis_angle(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-12:
        return np.eye(3)
    k = rotvec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def axis_angle_from_rotation(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    cos = np.clip((np.trace(rot) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return axis / (2 * np.sin(theta)) * theta


@dataclass
class CameraParams:
    """Camera-to-world pose (axis-angle + translation) and pinhole intrinsics."""

    pose: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    skew: float = 0.0
    image_id: int = 0
    timestep: int = 0
    sensor_id: int | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(6)
        if not np.all(np.isfinite(self.pose)):
            raise DomainError(f"camera {self.image_id}: non-finite pose")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"camera {self.image_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f"camera {self.image_id}: principal point outside the image")
        if not np.linalg.norm(self.pose[:3]) < np.pi:
            raise DomainError(f"camera {self.image_id}: axis-angle magnitude must be < pi")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_axis_angle(self.pose[:3])

    @property
    def center(self) -> np.ndarray:
        return self.pose[3:].copy()

    @property
    def intrinsics(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.skew)

    def to_dict(self) -> dict:
        return {
            "pose": [float(v) for v in self.pose],
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "skew": float(self.skew), "width": int(self.width), "height": int(self.height),
            "image_id": int(self.image_id), "timestep": int(self.timestep), "sensor_id": self.sensor_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            pose=np.asarray(d["pose"], dtype=np.float64), fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
            skew=float(d.get("skew", 0.0)), image_id=int(d.get("image_id", 0)),
            timestep=int(d.get("timestep", 0)), sensor_id=d.get("sensor_id"),
        )


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """6-vector pose for a camera at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    rot = np.stack([right, true_up, back], axis=1)
    return np.concatenate([axis_angle_from_rotation(rot), eye])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple = (0, 0)
    source: str = "new"
    image_id: int = 0

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1) > 1e-6:
            raise DomainError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise DomainError("ray bounds must satisfy 0 < near < far")
        if self.source not in SOURCES:
            raise DomainError(f"unknown ray source {self.source!r}")


@dataclass
class RaySamples:
    depths: np.ndarray
    points: np.ndarray
    tau_end: float = field(default=0.0)


def pixel_directions(cam: CameraParams, rows, cols) -> np.ndarray:
    """World-frame unit directions through pixel centers."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    y_cv = (rows - cam.cy) / cam.fy
    x_cv = (cols - cam.cx - cam.skew * y_cv) / cam.fx
    d_cam = np.stack([x_cv, -y_cv, -np.ones_like(x_cv)], axis=-1)
    d = d_cam @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def camera_rays(cam: CameraParams):
    """Pixel grid of a camera: ``(rows, cols, origins, directions)``, row-major."""
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    dirs = pixel_directions(cam, rows, cols)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return rows, cols, origins, dirs


def ray_box(origins, dirs, bmin, bmax):
    """Slab intersection; returns ``(near, far, hit)``. Misses get a dummy interval."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(bmin) - origins) * inv
        t1 = (np.asarray(bmax) - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, 1e-4)
    hit = tmax > near
    near = np.where(hit, near, 1.0)
    far = np.where(hit, tmax, 2.0)
    return near, far, hit


def camera_ray(cam: CameraParams, row: int, col: int, bounds=None) -> Ray:
    """Ray through the center of pixel ``(row, col)``; ``bounds`` clips near/far to a box."""
    if not (0 <= row < cam.height and 0 <= col < cam.width):
        raise DomainError(f"pixel ({row}, {col}) outside a {cam.height}x{cam.width} image")
    d = pixel_directions(cam, [row], [col])[0]
    o = cam.center
    near, far = 0.1, 10.0
    if bounds is not None:
        n, f, _ = ray_box(o[None], d[None], *bounds)
        near, far = float(n[0]), float(f[0])
    return Ray(o, d, near, far, pixel=(int(row), int(col)), image_id=cam.image_id)


# ---------------------------------------------------------------------------
# Depth sampling

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(z):
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def keyed_uniform(seed, image_id, rows, cols, n) -> np.ndarray:
    """Uniforms in [0, 1) keyed by (seed, image, pixel, sample index).

    Each value depends only on its key, so results are independent of how
    pixels are batched or scheduled.
    """
    rows = np.asarray(rows, dtype=np.uint64)
    cols = np.asarray(cols, dtype=np.uint64)
    ids = np.broadcast_to(np.asarray(image_id, dtype=np.int64).astype(np.uint64), rows.shape)
    with np.errstate(over="ignore"):
        key = _splitmix(np.full(rows.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        key = _splitmix(key ^ ids)
        key = _splitmix(key ^ (rows << np.uint64(32) | cols))
        z = _splitmix(key[:, None] ^ np.arange(n, dtype=np.uint64)[None, :])
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 2 ** 53)


def depth_grid(near, far, n, jitter=None):
    """Depths ``(R, n)`` and interval lengths ``(R, n)`` for uniform bins.

    Bin centers when ``jitter`` is None, else ``near + (i + u) * step``. The
    final interval ends at ``far + (far - near) / n``.
    """
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    step = (far - near) / n
    u = 0.5 if jitter is None else jitter
    depths = near + (np.arange(n)[None, :] + u) * step
    ends = np.concatenate([depths[:, 1:], far + step], axis=1)
    return depths, ends - depths


def sample_depths(ray: Ray, n: int, stratified: bool = False, seed: int = 0) -> RaySamples:
    if n < 1:
        raise DomainError("need at least one sample")
    jitter = None
    if stratified:
        jitter = keyed_uniform(seed, ray.image_id, [ray.pixel[0]], [ray.pixel[1]], n)
    depths, _ = depth_grid([ray.near], [ray.far], n, jitter)
    depths = depths[0]
    points = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
    return RaySamples(depths, points, ray.far + (ray.far - ray.near) / n)


# ---------------------------------------------------------------------------
# Compositing


def composite(colors, sigmas, depths, tau_end=None, background=(0.0, 0.0, 0.0)):
    """Alpha-composite one ray.

    ``depths`` holds n increasing sample depths plus, unless ``tau_end`` is
    given, the closing depth of the last interval. Returns ``(rgb, weights,
    opacity)`` where ``rgb`` includes ``(1 - opacity) * background``.
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    n = len(sigmas)
    if n < 1 or len(colors) != n:
        raise DomainError("colors and sigmas must have equal nonzero length")
    if tau_end is not None:
        depths = np.append(depths, tau_end)
    if len(depths) != n + 1:
        raise DomainError("need n + 1 depths (or n depths and tau_end)")
    deltas = np.diff(depths)
    if np.any(deltas <= 0):
        raise DomainError("depths must be strictly increasing")
    bg = np.asarray(background, dtype=np.float64)
    rgb, w, tr = kernels.composite_fwd(colors[None], sigmas[None], deltas[None], bg)
    return rgb[0], w[0], float(1.0 - tr[0, -1])


def composite_backward(drgb, colors, deltas, weights, transmittance, background):
    """Gradients of composited rgb w.r.t. per-sample colors and densities (batched)."""
    return kernels.composite_bwd(drgb, colors, deltas, weights, transmittance, background)


# ---------------------------------------------------------------------------
# Field rendering


@dataclass
class RayBatch:
    """Rays in world space plus the embedding rows they render with."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    app_idx: np.ndarray
    geo_idx: np.ndarray

    def __len__(self):
        return len(self.origins)

    def take(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
                        self.app_idx[idx], self.geo_idx[idx])


def to_unit_cube(points, bmin, bmax):
    """Affine map from the scene box into [0,1]^3; returns (clipped, inside mask)."""
    bmin = np.asarray(bmin, dtype=points.dtype)
    span = np.asarray(bmax, dtype=points.dtype) - bmin
    u = (points - bmin) / span
    inside = np.all((u >= 0) & (u <= 1), axis=-1)
    return np.clip(u, 0, 1), inside


@dataclass
class RenderCache:
    field_cache: object
    colors: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray


def render_rays(params: FieldParams, batch: RayBatch, n_samples: int, jitter=None):
    """Render a batch; returns ``(rgb (R, 3), RenderCache)`` in the params dtype."""
    dt = params.dtype
    cfg = params.config
    depths, deltas = depth_grid(batch.near, batch.far, n_samples, jitter)
    pts = batch.origins[:, None, :] + depths[..., None] * batch.dirs[:, None, :]
    unit, inside = to_unit_cube(pts.astype(dt), cfg.bbox_min, cfg.bbox_max)
    sigma, color, fcache = field_forward(params, unit, batch.dirs.astype(dt), batch.app_idx,
                                         batch.geo_idx, inside)
    deltas = deltas.astype(dt)
    bg = np.asarray(cfg.background, dtype=dt)
    rgb, w, tr = kernels.composite_fwd(color, sigma, deltas, bg)
    return rgb, RenderCache(fcache, color, deltas, w, tr)


def render_backward(params: FieldParams, cache: RenderCache, drgb) -> dict:
    bg = np.asarray(params.config.background, dtype=params.dtype)
    dc, ds = kernels.composite_bwd(drgb.astype(params.dtype), cache.colors, cache.deltas,
                                   cache.weights, cache.transmittance, bg)
    return field_backward(params, cache.field_cache, ds, dc)


def embedding_rows(params: FieldParams, t: int, image_id: int | None = None):
    """(appearance row, geometry row) for rendering timestep ``t``."""
    if not 0 <= t < params.n_timesteps:
        raise ProtocolError(f"timestep {t} is not registered (have 0..{params.n_timesteps - 1})")
    if params.config.per_image_appearance:
        if image_id is None or not 0 <= image_id < len(params.arrays["emb_app"]):
            return 0, t
        return image_id, t
    return t, t


def camera_batch(params: FieldParams, cam: CameraParams, t: int, rows=None, cols=None):
    app, geo = embedding_rows(params, t, cam.image_id)
    if rows is None:
        rows, cols, origins, dirs = camera_rays(cam)
    else:
        rows, cols = np.asarray(rows), np.asarray(cols)
        dirs = pixel_directions(cam, rows, cols)
        origins = np.broadcast_to(cam.center, dirs.shape).copy()
    near, far, _ = ray_box(origins, dirs, params.config.bbox_min, params.config.bbox_max)
    n = len(rows)
    batch = RayBatch(origins, dirs, near, far, np.full(n, app), np.full(n, geo))
    return rows, cols, batch


def render_ray(params: FieldParams, ray: Ray, t: int, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
               stratified: bool = False) -> np.ndarray:
    app, geo = embedding_rows(params, t, ray.image_id)
    jitter = None
    if stratified:
        jitter = keyed_uniform(seed, ray.image_id, [ray.pixel[0]], [ray.pixel[1]], n_samples)
    batch = RayBatch(ray.origin[None], ray.direction[None], np.array([ray.near]), np.array([ray.far]),
                     np.array([app]), np.array([geo]))
    rgb, _ = render_rays(params, batch, n_samples, jitter)
    return rgb[0]


def render_image(params: FieldParams, cam: CameraParams, t: int, n_samples: int = DEFAULT_SAMPLES,
                 seed: int = 0, stratified: bool = False, workers: int = 1, chunk_rows: int = 8) -> np.ndarray:
    """Render every pixel. Rows are split into fixed chunks, so the result does
    not depend on ``workers``."""
    rows, cols, batch = camera_batch(params, cam, t)
    jitter = keyed_uniform(seed, cam.image_id, rows, cols, n_samples) if stratified else None
    per_chunk = chunk_rows * cam.width
    starts = range(0, len(rows), per_chunk)

    def work(start):
        sl = slice(start, start + per_chunk)
        rgb, _ = render_rays(params, batch.take(sl), n_samples, None if jitter is None else jitter[sl])
        return rgb

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return np.concatenate(parts, axis=0).reshape(cam.height, cam.width, 3)
