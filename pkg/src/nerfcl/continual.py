"""The continual protocol: strategies, ray pools, generative replay, replay buffers.

At each timestep t the runner reveals S_t, builds a ray pool from the new
views and whatever the replay buffer offers, trains theta_t, updates the
buffer, and deploys theta_t (writes its checkpoint).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nerfcl.errors import ConfigError, ProtocolError, TrainingError
from nerfcl.field import FieldConfig, FieldParams, init_params, register_image, register_timestep, save_checkpoint
from nerfcl.metrics import psnr
from nerfcl.optim import (EWC_LAMBDA, FisherDiag, NonFiniteGradient, adam_step, estimate_fisher, ewc_grad,
                          ewc_penalty, init_optim, meil_loss, nerf_loss, nerf_loss_grad)
from nerfcl.render import (CameraParams, RayBatch, camera_rays, ray_box, render_backward, render_image,
                           render_rays)
from nerfcl.scenes import Dataset, ImageRecord, TimestepData

log = logging.getLogger(__name__)

KINDS = ("NT", "EWC", "ER", "CLNeRF_noER", "CLNeRF", "MEIL", "UB")
NEW, ER_SRC, GR_SRC = 0, 1, 2
SOURCE_NAMES = {NEW: "new", ER_SRC: "experience_replay", GR_SRC: "generative_replay"}
POSE_DIM = 6
INTRINSICS_DIM = 5
BYTES_PER_REAL = 4


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "CLNeRF"
    buffer_capacity: int | str = 10  # count, or "25%" of all training images
    buffer_policy: str = "reservoir"
    reinit_per_step: bool | None = None  # None: re-init for hash grids, inherit for frequency
    iters_per_step: int = 1000
    batch_rays: int = 512
    n_samples: int = 32
    stratified: bool = True
    replay_mode: str = "offline_cache"
    ewc_lambda: float = EWC_LAMBDA
    fisher_batches: int = 32
    fisher_batch_rays: int = 1024
    meil_new_fraction: float = 2.0 / 3.0
    lr_fast: float = 1e-2
    lr_slow: float = 1e-3
    max_skip_fraction: float = 0.01
    log_every: int = 50
    eval_samples: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.buffer_policy not in ("reservoir", "prioritized"):
            raise ConfigError("buffer_policy must be 'reservoir' or 'prioritized'")
        if self.replay_mode not in ("offline_cache", "online_teacher"):
            raise ConfigError("replay_mode must be 'offline_cache' or 'online_teacher'")
        if self.iters_per_step < 1 or self.batch_rays < 1 or self.n_samples < 1:
            raise ConfigError("iters_per_step, batch_rays and n_samples must be >= 1")
        if isinstance(self.buffer_capacity, str):
            if not self.buffer_capacity.endswith("%"):
                raise ConfigError("buffer_capacity must be a count or a percentage like '25%'")
            float(self.buffer_capacity[:-1])
        elif self.buffer_capacity < 0:
            raise ConfigError("buffer_capacity must be >= 0")

    def validate_for(self, field_cfg: FieldConfig):
        if self.kind == "EWC" and field_cfg.encoder == "hash_grid":
            raise ConfigError("EWC cannot be combined with the hash-grid backbone, which re-initializes "
                              "every timestep; use encoder = frequency")

    def reinit(self, field_cfg: FieldConfig) -> bool:
        if self.reinit_per_step is None:
            return field_cfg.encoder == "hash_grid"
        return self.reinit_per_step

    def capacity(self, n_total_images: int) -> int:
        if self.kind == "UB":
            return n_total_images  # joint training keeps every image
        if self.kind in ("NT", "EWC", "CLNeRF_noER", "MEIL"):
            return 0
        k = self.buffer_capacity
        if isinstance(k, str):
            return int(math.floor(float(k[:-1]) / 100.0 * n_total_images))
        return int(k)


# ---------------------------------------------------------------------------
# Replay buffer


@dataclass
class ReplayBuffer:
    """K stored images plus the cameras of every image ever offered."""

    capacity: int
    policy: str = "reservoir"
    seed: int = 0
    stored: list = field(default_factory=list)
    all_cameras: list = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng([self.seed, 2])

    @property
    def stored_ids(self) -> set:
        return {im.image_id for im in self.stored}

    def historical(self):
        """(stored records, cameras of images available only as cameras)."""
        ids = self.stored_ids
        return list(self.stored), [c for c in self.all_cameras if c.image_id not in ids]

    def check(self):
        assert len(self.stored) <= self.capacity
        assert len(self.all_cameras) == self.seen
        cam_ids = {c.image_id for c in self.all_cameras}
        assert self.stored_ids <= cam_ids


def reservoir_update(buffer: ReplayBuffer, images) -> ReplayBuffer:
    """Classic reservoir sampling over the global image stream.

    Below capacity images are appended. Afterwards the i-th image overall
    draws j uniformly from {1..i} and replaces slot j when j <= K. Cameras are
    always kept.
    """
    for im in images:
        buffer.seen += 1
        buffer.all_cameras.append(im.camera)
        if buffer.capacity == 0:
            continue
        if len(buffer.stored) < buffer.capacity:
            buffer.stored.append(im)
            continue
        j = int(buffer.rng.integers(1, buffer.seen + 1))
        if j <= buffer.capacity:
            buffer.stored[j - 1] = im
    return buffer


def prioritized_update(buffer: ReplayBuffer, images, score) -> ReplayBuffer:
    """Keep the K candidates with the lowest ``score(image)`` (rendering PSNR).

    Ties go to the lower image id.
    """
    for im in images:
        buffer.seen += 1
        buffer.all_cameras.append(im.camera)
    if buffer.capacity == 0:
        return buffer
    candidates = list(buffer.stored) + list(images)
    ranked = sorted(candidates, key=lambda im: (score(im), im.image_id))
    buffer.stored = sorted(ranked[: buffer.capacity], key=lambda im: im.image_id)
    return buffer


def storage_bytes(buffer: ReplayBuffer, cameras=None) -> dict:
    """Bytes for cameras (6 pose + 5 intrinsic float32 each, intrinsics shared per
    sensor when ``sensor_id`` is set) and stored 8-bit RGB images."""
    cams = buffer.all_cameras if cameras is None else cameras
    sensors = {c.sensor_id for c in cams if c.sensor_id is not None}
    unshared = sum(1 for c in cams if c.sensor_id is None)
    cam_bytes = BYTES_PER_REAL * (POSE_DIM * len(cams) + INTRINSICS_DIM * (unshared + len(sensors)))
    img_bytes = sum(int(im.pixels.shape[0] * im.pixels.shape[1] * 3) for im in buffer.stored)
    return {"cameras": cam_bytes, "images": img_bytes, "total": cam_bytes + img_bytes}


# ---------------------------------------------------------------------------
# Ray pools


@dataclass
class PoolImage:
    image_id: int
    timestep: int
    camera: CameraParams
    source: int
    pixels: np.ndarray | None  # None for generative replay
    mask: np.ndarray | None


@dataclass
class RayPool:
    """Every usable pixel of every view in the pool, flattened."""

    images: list
    batch: RayBatch
    rows: np.ndarray
    cols: np.ndarray
    image_index: np.ndarray
    source: np.ndarray
    targets: np.ndarray  # NaN where a pseudo-label is still missing

    def __len__(self):
        return len(self.source)

    def partition(self, src) -> list:
        return [im for im in self.images if im.source == src]

    def take(self, idx):
        return self.batch.take(idx), self.targets[idx]


def _app_index(cfg: FieldConfig, image_id: int, t: int) -> int:
    return image_id if cfg.per_image_appearance else t


def build_ray_pool(field_cfg: FieldConfig, new: TimestepData, stored=(), gr_cameras=()) -> RayPool:
    """Candidate rays from new views, stored images and camera-only history.

    Transient-masked pixels are dropped, so each remaining pixel is one
    equally likely candidate.
    """
    images = [PoolImage(im.image_id, im.timestep, im.camera, NEW, im.pixels, im.mask) for im in new.images]
    images += [PoolImage(im.image_id, im.timestep, im.camera, ER_SRC, im.pixels, im.mask) for im in stored]
    images += [PoolImage(c.image_id, c.timestep, c, GR_SRC, None, None) for c in gr_cameras]
    parts = {k: [] for k in ("o", "d", "near", "far", "app", "geo", "r", "c", "img", "src", "tgt")}
    for k, im in enumerate(images):
        rows, cols, origins, dirs = camera_rays(im.camera)
        keep = np.ones(len(rows), dtype=bool) if im.mask is None else im.mask.ravel() == 0
        near, far, _ = ray_box(origins[keep], dirs[keep], field_cfg.bbox_min, field_cfg.bbox_max)
        n = int(keep.sum())
        parts["o"].append(origins[keep])
        parts["d"].append(dirs[keep])
        parts["near"].append(near)
        parts["far"].append(far)
        parts["app"].append(np.full(n, _app_index(field_cfg, im.image_id, im.timestep)))
        parts["geo"].append(np.full(n, im.timestep))
        parts["r"].append(rows[keep])
        parts["c"].append(cols[keep])
        parts["img"].append(np.full(n, k))
        parts["src"].append(np.full(n, im.source, dtype=np.int8))
        if im.pixels is None:
            parts["tgt"].append(np.full((n, 3), np.nan))
        else:
            parts["tgt"].append(im.pixels.reshape(-1, 3)[keep])

    def cat(key, shape=(0,), dtype=np.float64):
        return np.concatenate(parts[key]) if parts[key] else np.zeros(shape, dtype=dtype)

    batch = RayBatch(cat("o", (0, 3)), cat("d", (0, 3)), cat("near"), cat("far"),
                     cat("app", dtype=np.int64), cat("geo", dtype=np.int64))
    return RayPool(images, batch, cat("r", dtype=np.int64), cat("c", dtype=np.int64),
                   cat("img", dtype=np.int64), cat("src", dtype=np.int8), cat("tgt", (0, 3)))


def sample_uniform(pool: RayPool, rng, n: int) -> np.ndarray:
    return rng.integers(0, len(pool), size=n)


def sample_biased(pool: RayPool, rng, n: int, new_fraction: float) -> np.ndarray:
    """MEIL-style batches: ``new_fraction`` of the rays from new views, the rest
    from history. The new-ray count is randomly rounded so its mean is exact."""
    new_idx = np.flatnonzero(pool.source == NEW)
    old_idx = np.flatnonzero(pool.source != NEW)
    if len(old_idx) == 0:
        return sample_uniform(pool, rng, n)
    want = n * new_fraction
    n_new = int(math.floor(want)) + int(rng.random() < want - math.floor(want))
    picks_new = new_idx[rng.integers(0, len(new_idx), size=n_new)]
    picks_old = old_idx[rng.integers(0, len(old_idx), size=n - n_new)]
    return np.concatenate([picks_new, picks_old])


# ---------------------------------------------------------------------------
# Generative replay


def pseudo_label(teacher: FieldParams | None, pool: RayPool, idx=None, mode: str = "offline_cache",
                 n_samples: int = 32, chunk: int = 4096) -> np.ndarray:
    """Teacher colors for generative-replay rays (bin-center sampling).

    ``offline_cache`` renders every generative-replay view up front and stores
    the colors in ``pool.targets``. ``online_teacher`` renders only the rays in
    ``idx`` that have not been labelled yet. Returns the labels for ``idx``
    (or for all generative-replay rays when ``idx`` is None).
    """
    gr = np.flatnonzero(pool.source == GR_SRC)
    if len(gr) and teacher is None:
        raise ProtocolError("generative replay needs the previous model")
    if len(gr) == 0:
        todo = gr
    elif mode == "offline_cache":
        todo = gr[np.isnan(pool.targets[gr, 0])]
    else:
        sel = gr if idx is None else np.asarray(idx)[pool.source[idx] == GR_SRC]
        todo = np.unique(sel[np.isnan(pool.targets[sel, 0])])
    for start in range(0, len(todo), chunk):
        part = todo[start:start + chunk]
        rgb, _ = render_rays(teacher, pool.batch.take(part), n_samples)
        pool.targets[part] = rgb
    return pool.targets[gr if idx is None else idx]


# ---------------------------------------------------------------------------
# Training


@dataclass
class StepLog:
    step: int
    iteration: int
    loss: float
    skipped: int
    buffer_bytes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepContext:
    kind: str
    t: int
    teacher: FieldParams | None = None
    fisher: FisherDiag | None = None
    buffer_bytes: int = 0


def _iteration_grads(params, pool, idx, rng, cfg: StrategyConfig, ctx: StepContext, progress):
    if cfg.replay_mode == "online_teacher" and ctx.teacher is not None:
        pseudo_label(ctx.teacher, pool, idx, "online_teacher", cfg.eval_samples)
    batch, targets = pool.take(idx)
    jitter = rng.random((len(idx), cfg.n_samples)) if cfg.stratified else None
    rgb, cache = render_rays(params, batch, cfg.n_samples, jitter)
    if ctx.kind == "MEIL":
        new = pool.source[idx] == NEW
        loss, d_new, d_old = meil_loss(rgb[new], targets[new], rgb[~new], targets[~new], progress)
        drgb = np.zeros_like(rgb)
        drgb[new] = d_new
        if d_old is not None:
            drgb[~new] = d_old
    else:
        loss = nerf_loss(rgb, targets)
        drgb = nerf_loss_grad(rgb, targets)
    grads = render_backward(params, cache, drgb)
    if ctx.fisher is not None:
        loss += ewc_penalty(params, ctx.fisher, cfg.ewc_lambda)
        for name, g in ewc_grad(params, ctx.fisher, cfg.ewc_lambda).items():
            grads[name] += g
    return loss, grads


def train_on_pool(params: FieldParams, pool: RayPool, cfg: StrategyConfig, ctx: StepContext, rng,
                  logs: list) -> FieldParams:
    """Run ``cfg.iters_per_step`` Adam iterations on rays drawn from ``pool``."""
    if len(pool) == 0:
        raise TrainingError("empty ray pool", ctx.t)
    optim = init_optim(params, cfg.lr_fast, cfg.lr_slow)
    n_iter = cfg.iters_per_step
    for it in range(n_iter):
        if ctx.kind == "MEIL":
            idx = sample_biased(pool, rng, cfg.batch_rays, cfg.meil_new_fraction)
        else:
            idx = sample_uniform(pool, rng, cfg.batch_rays)
        progress = it / (n_iter - 1) if n_iter > 1 else 1.0
        loss, grads = _iteration_grads(params, pool, idx, rng, cfg, ctx, progress)
        try:
            adam_step(optim, params, grads)
        except NonFiniteGradient:
            optim.skipped += 1
        if it % cfg.log_every == 0 or it == n_iter - 1:
            logs.append(StepLog(ctx.t, it, float(loss), optim.skipped, ctx.buffer_bytes))
    if optim.skipped > cfg.max_skip_fraction * n_iter:
        raise TrainingError(f"{optim.skipped} of {n_iter} steps had non-finite gradients", ctx.t)
    return params


def fisher_for_step(params: FieldParams, data: TimestepData, cfg: StrategyConfig, seed: int, t: int) -> FisherDiag:
    pool = build_ray_pool(params.config, data)
    rng = np.random.default_rng([seed, 3, t])
    batches = [sample_uniform(pool, rng, cfg.fisher_batch_rays) for _ in range(cfg.fisher_batches)]

    def grad_fn(p, i):
        batch, targets = pool.take(batches[i])
        rgb, cache = render_rays(p, batch, cfg.n_samples)
        return render_backward(p, cache, nerf_loss_grad(rgb, targets))

    return estimate_fisher(params, grad_fn, cfg.fisher_batches)


def _register_upto(params: FieldParams, t: int, images) -> FieldParams:
    while params.n_timesteps <= t:
        params = register_timestep(params, params.n_timesteps)
    if params.config.per_image_appearance:
        top = max((im.image_id for im in images), default=-1)
        while len(params.arrays["emb_app"]) <= top:
            params = register_image(params, len(params.arrays["emb_app"]))
    return params


def image_psnr(params: FieldParams, im: ImageRecord, t: int, n_samples: int) -> float:
    pred = render_image(params, im.camera, t, n_samples)
    valid = None if im.mask is None else im.mask == 0
    return psnr(pred, im.pixels, valid)


@dataclass
class RunResult:
    params: FieldParams
    checkpoints: list
    logs: list
    buffer: ReplayBuffer
    wall_time: float
    buffer_bytes: int


def run_sequence(dataset: Dataset, strategy: StrategyConfig, field_cfg: FieldConfig, seed: int = 0,
                 out_dir=None, on_step=None) -> RunResult:
    """Train sequentially over every timestep of ``dataset``.

    Writes ``ckpt_t<k>.ctrd`` and ``log.jsonl`` under ``out_dir`` when given.
    Kind ``UB`` trains once on all timesteps at once instead.
    """
    strategy.validate_for(field_cfg)
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n_train = sum(len(dataset.train(t).images) for t in range(dataset.n_timesteps))
    buffer = ReplayBuffer(strategy.capacity(n_train), strategy.buffer_policy, seed)
    logs, checkpoints = [], []
    if strategy.kind == "UB":
        steps = [TimestepData(dataset.n_timesteps - 1,
                              [im for t in range(dataset.n_timesteps) for im in dataset.train(t).images])]
    else:
        steps = [dataset.train(t) for t in range(dataset.n_timesteps)]
    deployed = None
    fisher = None
    for k, data in enumerate(steps):
        t = data.timestep
        all_ids = [im for ts in dataset.timesteps[: t + 1] for im in ts.images]
        if deployed is None or strategy.reinit(field_cfg):
            params = _register_upto(init_params(field_cfg, seed), t, all_ids)
        else:
            params = _register_upto(deployed.copy(), t, all_ids)
        stored, gr_cams = buffer.historical()
        kind = strategy.kind
        if kind in ("NT", "EWC", "UB"):
            pool = build_ray_pool(field_cfg, data)
        elif kind == "ER":
            pool = build_ray_pool(field_cfg, data, stored)
        else:
            pool = build_ray_pool(field_cfg, data, stored, gr_cams)
        ctx = StepContext(kind, t, deployed, fisher if kind == "EWC" else None,
                          storage_bytes(buffer)["total"])
        if strategy.replay_mode == "offline_cache" and kind in ("CLNeRF", "CLNeRF_noER", "MEIL"):
            pseudo_label(deployed, pool, mode="offline_cache", n_samples=strategy.eval_samples)
        rng = np.random.default_rng([seed, 1, k])
        try:
            params = train_on_pool(params, pool, strategy, ctx, rng, logs)
        except TrainingError as exc:
            if exc.step is None:
                exc.step = t
            raise
        del pool  # generative-replay labels live only for the step
        if kind != "UB":
            if strategy.buffer_policy == "prioritized" and buffer.capacity > 0:
                prioritized_update(buffer, data.images,
                                   lambda im: image_psnr(params, im, im.timestep, strategy.eval_samples))
            else:
                reservoir_update(buffer, data.images)
        else:
            reservoir_update(buffer, data.images)
        if kind == "EWC":
            fisher = fisher_for_step(params, data, strategy, seed, t)
        deployed = params
        if out is not None:
            path = out / f"ckpt_t{t}.ctrd"
            save_checkpoint(path, params)
            checkpoints.append(path)
        if on_step is not None:
            on_step(t, params, buffer)
        log.info("step %d done: loss %.5f", t, logs[-1].loss)
    elapsed = time.perf_counter() - start
    if out is not None:
        with open(out / "log.jsonl", "w") as fh:
            for rec in logs:
                fh.write(rec.to_json() + "\n")
    return RunResult(deployed, checkpoints, logs, buffer, elapsed, storage_bytes(buffer)["total"])
