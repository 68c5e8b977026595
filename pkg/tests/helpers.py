"""Shared builders and the finite-difference gradient checker."""

import numpy as np

from nerfcl.field import FieldConfig, init_params, register_timestep
from nerfcl.optim import nerf_loss, nerf_loss_grad
from nerfcl.render import CameraParams, camera_batch, look_at_pose, render_backward, render_rays


def random_params(encoder="hash_grid", seed=0, n_timesteps=2, scale=0.5, **cfg_kw):
    """float64 params with non-trivial grid tables and embeddings."""
    cfg = FieldConfig(encoder=encoder, **cfg_kw)
    p = init_params(cfg, seed, n_timesteps, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    if "grid" in p.arrays:
        p.arrays["grid"] = rng.uniform(-scale, scale, p.arrays["grid"].shape)
    for name in ("emb_app", "emb_geo"):
        p.arrays[name] = rng.uniform(-scale, scale, p.arrays[name].shape)
    return p


def make_camera(width=16, height=16, image_id=0, timestep=0, eye=(2.2, 1.0, 2.6)):
    pose = look_at_pose(np.array(eye), np.zeros(3))
    return CameraParams(pose, 20.0, 20.0, (width - 1) / 2, (height - 1) / 2, width, height,
                        image_id=image_id, timestep=timestep)


def crop_batch(params, t=1, size=4):
    cam = make_camera()
    rows, cols = np.meshgrid(np.arange(6, 6 + size), np.arange(6, 6 + size), indexing="ij")
    _, _, batch = camera_batch(params, cam, t, rows.ravel(), cols.ravel())
    return batch


def pipeline_loss(params, batch, target, n_samples=8, jitter=None):
    rgb, _ = render_rays(params, batch, n_samples, jitter)
    return nerf_loss(rgb, target)


def pipeline_grads(params, batch, target, n_samples=8, jitter=None):
    rgb, cache = render_rays(params, batch, n_samples, jitter)
    return render_backward(params, cache, nerf_loss_grad(rgb, target))


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing noise by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central_difference(loss_fn, params, name, i, h):
    arr = params.arrays[name].reshape(-1)
    old = arr[i]
    arr[i] = old + h
    up = loss_fn(params)
    arr[i] = old - h
    down = loss_fn(params)
    arr[i] = old
    return (up - down) / (2 * h)


def fd_check(loss_fn, params, grads, picks, h=1e-5, tol=1e-5):
    """Worst relative error over ``picks`` = [(array name, flat index), ...].

    A probe that straddles a ReLU kink is retried with a 10x smaller step;
    the better of the two estimates counts.
    """
    worst = 0.0
    worst_at = None
    for name, i in picks:
        analytic = float(grads[name].reshape(-1)[i])
        num = _central_difference(loss_fn, params, name, i, h)
        err = relative_error(analytic, num)
        if err > tol:
            fine = _central_difference(loss_fn, params, name, i, h / 10)
            if relative_error(analytic, fine) < err:
                num, err = fine, relative_error(analytic, fine)
        if err > worst:
            worst, worst_at = err, (name, i, analytic, num)
    return worst, worst_at


def grid_picks(params, grads, per_level=100, seed=0):
    """Per level: touched entries (nonzero gradient) first, then random ones."""
    rng = np.random.default_rng(seed)
    g = grads["grid"]
    levels, tsize, nf = g.shape
    picks = []
    for lvl in range(levels):
        flat = g[lvl].reshape(-1)
        touched = np.flatnonzero(flat)
        chosen = list(rng.permutation(touched)[:per_level])
        while len(chosen) < per_level:
            chosen.append(int(rng.integers(0, tsize * nf)))
        picks += [("grid", lvl * tsize * nf + int(c)) for c in chosen]
    return picks


def decoder_picks(params):
    names = [n for n in params.arrays if n.startswith(("sigma_", "color_"))]
    return [(n, i) for n in names for i in range(params.arrays[n].size)]


def embedding_picks(params):
    return [(n, i) for n in ("emb_app", "emb_geo") for i in range(params.arrays[n].size)]


def familywise_z(n_tests, z=3.0):
    """Per-test z bound that keeps ``n_tests`` simultaneous checks at the false-alarm rate of one ``z`` check."""
    from scipy import stats

    alpha = 1 - (1 - 2 * stats.norm.sf(z)) ** (1 / n_tests)
    return float(stats.norm.isf(alpha / 2))


ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    """Record and print one acceptance line; the terminal summary repeats them."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
