"""Radiance field: spatial encoders, color/density decoders, per-scan embeddings.

All trainable state lives in :class:`FieldParams`, an ordered mapping of named
arrays. Forward passes return a cache that the matching ``*_backward``
function consumes, so the gradient of any scalar loss built from field
outputs is available without an autodiff framework.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from nerfcl import kernels
from nerfcl.errors import DomainError, ProtocolError

APPEARANCE_DIM = 48
GEOMETRY_DIM = 16

MAGIC = b"CTRD"
FORMAT_VERSION = 1
_OPTIM_MAGIC = b"ADAM"


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2 ** 14
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.382

    def __post_init__(self):
        if self.levels < 1:
            raise DomainError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise DomainError("table_size must be a power of two")
        if self.base_resolution < 2:
            raise DomainError("base_resolution must be >= 2")
        if not self.growth_factor > 1:
            raise DomainError("growth_factor must be > 1")
        if self.features_per_level < 1:
            raise DomainError("features_per_level must be >= 1")

    @property
    def resolutions(self) -> np.ndarray:
        return np.array(
            [int(math.floor(self.base_resolution * self.growth_factor ** lvl)) for lvl in range(self.levels)],
            dtype=np.int64,
        )

    @property
    def dense(self) -> np.ndarray:
        """Levels whose full vertex lattice fits in the table are indexed directly."""
        return np.array([(r + 1) ** 3 <= self.table_size for r in self.resolutions], dtype=np.uint8)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class FieldConfig:
    encoder: str = "hash_grid"
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    pos_freqs: int = 6
    dir_freqs: int = 4
    hidden: int = 64
    use_embeddings: bool = True
    per_image_appearance: bool = False
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.encoder not in ("hash_grid", "frequency"):
            raise DomainError(f"unknown encoder {self.encoder!r}")
        if self.pos_freqs < 1 or self.dir_freqs < 1:
            raise DomainError("frequency counts must be >= 1")
        if any(hi <= lo for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise DomainError("bbox_max must exceed bbox_min on every axis")

    @property
    def app_dim(self) -> int:
        return APPEARANCE_DIM if self.use_embeddings else 0

    @property
    def geo_dim(self) -> int:
        return GEOMETRY_DIM if self.use_embeddings else 0

    @property
    def feature_dim(self) -> int:
        if self.encoder == "hash_grid":
            return self.grid.output_dim
        return 3 * 2 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return 3 * 2 * self.dir_freqs

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("bbox_min", "bbox_max", "background"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["grid"] = HashGridConfig(**d["grid"])
        for key in ("bbox_min", "bbox_max", "background"):
            d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class FieldParams:
    """Trainable state. ``arrays`` preserves declaration order."""

    config: FieldConfig
    arrays: dict
    n_timesteps: int = 0

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def dtype(self):
        return self.arrays["sigma_w1"].dtype

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.n_timesteps)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.n_timesteps)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def encoder_state(self):
        if self.config.encoder == "hash_grid":
            return self.arrays["grid"]
        return {"pos_freqs": self.config.pos_freqs}


def _layer_shapes(cfg: FieldConfig) -> list:
    h = cfg.hidden
    shapes = []
    if cfg.encoder == "hash_grid":
        g = cfg.grid
        shapes.append(("grid", (g.levels, g.table_size, g.features_per_level)))
    sig_in = cfg.feature_dim + cfg.geo_dim
    col_in = cfg.feature_dim + cfg.dir_dim + cfg.app_dim
    shapes += [
        ("sigma_w1", (sig_in, h)), ("sigma_b1", (h,)), ("sigma_w2", (h, 1)), ("sigma_b2", (1,)),
        ("color_w1", (col_in, h)), ("color_b1", (h,)), ("color_w2", (h, 3)), ("color_b2", (3,)),
    ]
    return shapes


def init_params(cfg: FieldConfig, seed: int, n_timesteps: int = 0, dtype=np.float32) -> FieldParams:
    """Fresh parameters: weights uniform in +-1/sqrt(fan_in), grid tables in +-1e-4."""
    rng = np.random.default_rng(seed)
    shapes = dict(_layer_shapes(cfg))
    arrays = {}
    for name, shape in shapes.items():
        if name == "grid":
            arr = rng.uniform(-1e-4, 1e-4, size=shape)
        else:
            # biases share the bound of the weight matrix feeding them
            fan_in = shapes[name.replace("_b", "_w")][0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        arrays[name] = arr.astype(dtype)
    arrays["emb_app"] = np.zeros((0, cfg.app_dim), dtype=dtype)
    arrays["emb_geo"] = np.zeros((0, cfg.geo_dim), dtype=dtype)
    params = FieldParams(cfg, arrays, 0)
    for t in range(n_timesteps):
        params = register_timestep(params, t)
    return params


def register_timestep(params: FieldParams, t: int) -> FieldParams:
    """Append one geometry (and, per-scan mode, one appearance) embedding.

    New rows copy the previous scan's rows so a fresh scan starts as "no change".
    """
    if t != params.n_timesteps:
        raise ProtocolError(f"timesteps are append-only: expected {params.n_timesteps}, got {t}")
    out = params.copy()
    names = ["emb_geo"] if params.config.per_image_appearance else ["emb_app", "emb_geo"]
    for name in names:
        table = out.arrays[name]
        row = table[-1:] if len(table) else np.zeros((1, table.shape[1]), dtype=table.dtype)
        out.arrays[name] = np.concatenate([table, row], axis=0)
    out.n_timesteps = t + 1
    return out


def register_image(params: FieldParams, image_index: int) -> FieldParams:
    """Per-image appearance mode: append the appearance row for ``image_index``."""
    if not params.config.per_image_appearance:
        raise ProtocolError("register_image requires per_image_appearance")
    table = params.arrays["emb_app"]
    if image_index != len(table):
        raise ProtocolError(f"appearance rows are append-only: expected {len(table)}, got {image_index}")
    out = params.copy()
    row = table[-1:] if len(table) else np.zeros((1, table.shape[1]), dtype=table.dtype)
    out.arrays["emb_app"] = np.concatenate([table, row], axis=0)
    return out


# ---------------------------------------------------------------------------
# Encoders


def hash_encode(x, cfg: HashGridConfig, tables: np.ndarray) -> np.ndarray:
    """Multiresolution hash-grid features for points in the unit cube.

    ``x`` is a single point ``(3,)`` or a batch ``(N, 3)``; the result has
    ``cfg.levels * cfg.features_per_level`` columns.
    """
    x = np.asarray(x, dtype=tables.dtype)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != 3:
        raise DomainError("points must have 3 coordinates")
    if not np.all(np.isfinite(x2)) or x2.min() < 0 or x2.max() > 1:
        raise DomainError("hash_encode expects points inside [0, 1]^3")
    out = kernels.hash_encode_fwd(x2, tables, cfg.resolutions, cfg.dense)
    return out[0] if single else out


def frequency_encode(x, n_freqs: int) -> np.ndarray:
    """Interleaved ``[sin(2^k pi x_j), cos(2^k pi x_j)]`` over k < n_freqs, then j."""
    if n_freqs < 1:
        raise DomainError("n_freqs must be >= 1")
    x = np.asarray(x)
    scales = (2.0 ** np.arange(n_freqs)) * np.pi
    arg = x[..., None, :] * scales[:, None].astype(x.dtype)  # (..., K, 3)
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., K, 3, 2)
    return out.reshape(x.shape[:-1] + (n_freqs * x.shape[-1] * 2,))


def encode_points(params: FieldParams, x: np.ndarray) -> np.ndarray:
    """Unchecked batch encoder used on the hot path; ``x`` is ``(N, 3)`` in the unit cube."""
    cfg = params.config
    if cfg.encoder == "hash_grid":
        return kernels.hash_encode_fwd(x, params.arrays["grid"], cfg.grid.resolutions, cfg.grid.dense)
    return frequency_encode(x, cfg.pos_freqs)


# ---------------------------------------------------------------------------
# Decoders. Each is a two-layer MLP whose first layer splits into a per-point
# block (spatial features) and a per-ray block (direction code, embeddings),
# so ray-constant inputs are multiplied once per ray instead of once per sample.


def _mlp_forward(point_in, ray_in, w1, b1, w2, b2):
    dp = point_in.shape[-1]
    r, s = point_in.shape[:2]
    ray_part = ray_in @ w1[dp:] + b1  # (R, H)
    pre = (point_in.reshape(r * s, dp) @ w1[:dp]).reshape(r, s, -1) + ray_part[:, None, :]
    hid = np.maximum(pre, 0)
    out = hid @ w2 + b2
    return out, (point_in, ray_in, pre, hid)


def _mlp_backward(cache, dout, w1, w2):
    point_in, ray_in, pre, hid = cache
    dp = point_in.shape[-1]
    r, s, h = hid.shape
    flat_hid = hid.reshape(r * s, h)
    flat_dout = dout.reshape(r * s, -1)
    dw2 = flat_hid.T @ flat_dout
    db2 = flat_dout.sum(axis=0)
    dpre = (dout @ w2.T) * (pre > 0)
    flat_dpre = dpre.reshape(r * s, h)
    dray_pre = dpre.sum(axis=1)  # (R, H)
    dw1 = np.concatenate([point_in.reshape(r * s, dp).T @ flat_dpre, ray_in.T @ dray_pre], axis=0)
    db1 = dray_pre.sum(axis=0)
    dpoint = (flat_dpre @ w1[:dp].T).reshape(r, s, dp)
    dray = dray_pre @ w1[dp:].T
    return dpoint, dray, dw1, db1, dw2, db2


def _check_direction(d):
    norms = np.linalg.norm(np.atleast_2d(d), axis=-1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise DomainError("view direction must be a unit vector")


def decode_color(f, d, e_a, params: FieldParams) -> np.ndarray:
    """Color for one point: feature ``f``, unit direction ``d``, appearance code ``e_a``."""
    _check_direction(d)
    rgb, _ = color_forward(params, np.atleast_2d(f)[:, None, :], np.atleast_2d(d), np.atleast_2d(e_a))
    return rgb[:, 0, :].reshape(np.shape(f)[:-1] + (3,))


def decode_sigma(f, e_g, params: FieldParams) -> float:
    """Nonnegative density for one point from feature ``f`` and geometry code ``e_g``."""
    f = np.asarray(f)
    e_g = np.asarray(e_g)
    cfg = params.config
    if f.shape[-1] != cfg.feature_dim or e_g.shape[-1] != cfg.geo_dim:
        raise DomainError(f"expected feature dim {cfg.feature_dim} and geometry dim {cfg.geo_dim}")
    sigma, _ = sigma_forward(params, np.atleast_2d(f)[:, None, :], np.atleast_2d(e_g))
    out = sigma[:, 0]
    return float(out[0]) if f.ndim == 1 else out


def sigma_forward(params, feat, e_g):
    a = params.arrays
    pre, cache = _mlp_forward(feat, e_g, a["sigma_w1"], a["sigma_b1"], a["sigma_w2"], a["sigma_b2"])
    pre = pre[..., 0]
    return np.logaddexp(0, pre).astype(feat.dtype, copy=False), (cache, pre)


def sigma_backward(params, cache, dsigma):
    mlp_cache, pre = cache
    a = params.arrays
    dpre = (dsigma * expit(pre))[..., None]
    dfeat, de_g, dw1, db1, dw2, db2 = _mlp_backward(mlp_cache, dpre, a["sigma_w1"], a["sigma_w2"])
    return dfeat, de_g, {"sigma_w1": dw1, "sigma_b1": db1, "sigma_w2": dw2, "sigma_b2": db2}


def color_forward(params, feat, d, e_a):
    a = params.arrays
    dir_code = frequency_encode(np.asarray(d, dtype=feat.dtype), params.config.dir_freqs)
    ray_in = np.concatenate([dir_code, np.asarray(e_a, dtype=feat.dtype)], axis=-1)
    pre, cache = _mlp_forward(feat, ray_in, a["color_w1"], a["color_b1"], a["color_w2"], a["color_b2"])
    rgb = expit(pre)
    return rgb, (cache, rgb)


def color_backward(params, cache, drgb):
    mlp_cache, rgb = cache
    a = params.arrays
    dpre = drgb * rgb * (1 - rgb)
    dfeat, dray, dw1, db1, dw2, db2 = _mlp_backward(mlp_cache, dpre, a["color_w1"], a["color_w2"])
    de_a = dray[:, params.config.dir_dim:]
    return dfeat, de_a, {"color_w1": dw1, "color_b1": db1, "color_w2": dw2, "color_b2": db2}


# ---------------------------------------------------------------------------
# Whole-field evaluation


@dataclass
class FieldCache:
    x: np.ndarray
    inside: np.ndarray
    app_idx: np.ndarray
    geo_idx: np.ndarray
    sigma_cache: tuple
    color_cache: tuple


def field_forward(params: FieldParams, x_unit, dirs, app_idx, geo_idx, inside=None):
    """Evaluate density and color at ``x_unit`` (R, S, 3) for R rays of S samples.

    ``dirs`` (R, 3) are unit view directions; ``app_idx``/``geo_idx`` (R,) pick
    embedding rows. Points flagged outside by ``inside`` get zero density.
    """
    r, s, _ = x_unit.shape
    a = params.arrays
    app_idx = np.asarray(app_idx, dtype=np.int64)
    geo_idx = np.asarray(geo_idx, dtype=np.int64)
    if len(app_idx) and (app_idx.max() >= len(a["emb_app"]) or app_idx.min() < 0):
        raise ProtocolError("appearance index not registered")
    if len(geo_idx) and (geo_idx.max() >= len(a["emb_geo"]) or geo_idx.min() < 0):
        raise ProtocolError("geometry index not registered")
    flat_x = x_unit.reshape(r * s, 3)
    feat = encode_points(params, flat_x).reshape(r, s, -1)
    sigma, s_cache = sigma_forward(params, feat, a["emb_geo"][geo_idx])
    if inside is not None:
        sigma = sigma * inside
    rgb, c_cache = color_forward(params, feat, dirs, a["emb_app"][app_idx])
    return sigma, rgb, FieldCache(flat_x, inside, app_idx, geo_idx, s_cache, c_cache)


def field_backward(params: FieldParams, cache: FieldCache, dsigma, drgb) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter array, given upstream grads."""
    grads = params.zeros_like()
    if cache.inside is not None:
        dsigma = dsigma * cache.inside
    dfeat_s, de_g, gs = sigma_backward(params, cache.sigma_cache, dsigma)
    dfeat_c, de_a, gc = color_backward(params, cache.color_cache, drgb)
    for k, v in {**gs, **gc}.items():
        grads[k] = v.reshape(grads[k].shape).astype(grads[k].dtype, copy=False)
    if de_g.shape[1]:
        np.add.at(grads["emb_geo"], cache.geo_idx, de_g)
    if de_a.shape[1]:
        np.add.at(grads["emb_app"], cache.app_idx, de_a)
    if params.config.encoder == "hash_grid":
        dfeat = (dfeat_s + dfeat_c).reshape(cache.x.shape[0], -1)
        g = params.config.grid
        kernels.hash_encode_bwd(cache.x, dfeat, grads["grid"], g.resolutions, g.dense)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, encoder kind, JSON config block, then float32 LE
# arrays in declaration order; an optional optimizer section follows.


def _encoder_code(kind):
    return {"hash_grid": 0, "frequency": 1}[kind]


def save_checkpoint(path, params: FieldParams, optim_state=None) -> None:
    buf = io.BytesIO()
    meta = {
        "config": params.config.to_dict(),
        "n_timesteps": params.n_timesteps,
        "shapes": [[k, list(v.shape)] for k, v in params.arrays.items()],
    }
    block = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, _encoder_code(params.config.encoder)))
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    for arr in params.arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if optim_state is not None:
        ometa = json.dumps(optim_state.meta(), sort_keys=True).encode()
        buf.write(_OPTIM_MAGIC)
        buf.write(struct.pack("<Q", len(ometa)))
        buf.write(ometa)
        for moments in (optim_state.m, optim_state.v):
            for name in params.arrays:
                buf.write(np.ascontiguousarray(moments[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, with_optim: bool = False):
    """Read a checkpoint; returns ``FieldParams`` or ``(FieldParams, OptimState|None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DomainError(f"{path}: not a checkpoint (bad magic)")
    version, enc = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    (blen,) = struct.unpack_from("<Q", data, 12)
    meta = json.loads(data[20:20 + blen])
    cfg = FieldConfig.from_dict(meta["config"])
    if _encoder_code(cfg.encoder) != enc:
        raise DomainError(f"{path}: encoder code does not match config block")
    off = 20 + blen
    arrays = {}
    for name, shape in meta["shapes"]:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    params = FieldParams(cfg, arrays, meta["n_timesteps"])
    if not with_optim:
        return params
    state = None
    if data[off:off + 4] == _OPTIM_MAGIC:
        from nerfcl.optim import OptimState

        (olen,) = struct.unpack_from("<Q", data, off + 4)
        ometa = json.loads(data[off + 12:off + 12 + olen])
        off += 12 + olen
        moments = []
        for _ in range(2):
            d = {}
            for name, shape in meta["shapes"]:
                n = int(np.prod(shape))
                d[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
                off += 4 * n
            moments.append(d)
        state = OptimState.from_meta(ometa, moments[0], moments[1])
    return params, state


def with_config(params: FieldParams, **changes) -> FieldParams:
    return FieldParams(replace(params.config, **changes), params.arrays, params.n_timesteps)
