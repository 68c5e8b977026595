"""Hot kernels with a compiled backend and a pure-numpy fallback.

The backend is picked once at import: the Cython extension when it was built,
numpy otherwise. Set ``NERFCL_KERNELS=python`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

PRIME_Y = np.uint64(2654435761)
PRIME_Z = np.uint64(805459861)


def _cell(x, res):
    pos = x * res
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, res - 1)
    return i0, pos - i0


def corner_indices(i, j, k, res, dense, table_size):
    if dense:
        side = res + 1
        return i + side * (j + side * k)
    h = i.astype(np.uint64) ^ (j.astype(np.uint64) * PRIME_Y) ^ (k.astype(np.uint64) * PRIME_Z)
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _corners(x, res, dense, table_size):
    """Yield (corner index array, trilinear weight array) for the 8 corners."""
    ix, wx = _cell(x[:, 0], res)
    iy, wy = _cell(x[:, 1], res)
    iz, wz = _cell(x[:, 2], res)
    one = x.dtype.type(1)
    for c in range(8):
        bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        cw = (wx if bx else one - wx) * (wy if by else one - wy) * (wz if bz else one - wz)
        yield corner_indices(ix + bx, iy + by, iz + bz, res, dense, table_size), cw


def py_hash_encode_fwd(x, tables, resolutions, dense):
    n = x.shape[0]
    levels, tsize, nf = tables.shape
    out = np.zeros((n, levels * nf), dtype=tables.dtype)
    for lvl in range(levels):
        block = out[:, lvl * nf:(lvl + 1) * nf]
        for idx, cw in _corners(x, int(resolutions[lvl]), bool(dense[lvl]), tsize):
            block += cw[:, None] * tables[lvl, idx]
    return out


def py_hash_encode_bwd(x, dfeat, grad, resolutions, dense):
    levels, tsize, nf = grad.shape
    for lvl in range(levels):
        for idx, cw in _corners(x, int(resolutions[lvl]), bool(dense[lvl]), tsize):
            for f in range(nf):
                contrib = np.bincount(idx, weights=cw * dfeat[:, lvl * nf + f], minlength=tsize)
                grad[lvl, :, f] += contrib.astype(grad.dtype)


def py_composite_fwd(colors, sigmas, deltas, bg):
    tau = sigmas * deltas
    acc = np.cumsum(tau, axis=1)
    tr = np.empty((sigmas.shape[0], sigmas.shape[1] + 1), dtype=sigmas.dtype)
    tr[:, 0] = 1
    tr[:, 1:] = np.exp(-acc)
    w = -tr[:, :-1] * np.expm1(-tau)
    rgb = np.einsum("rn,rnc->rc", w, colors) + tr[:, -1:] * bg[None, :]
    return rgb.astype(sigmas.dtype), w, tr


def py_composite_bwd(drgb, colors, deltas, w, tr, bg):
    dc = w[:, :, None] * drgb[:, None, :]
    here = np.einsum("rc,rnc->rn", drgb, colors)
    contrib = w * here
    # suffix_i = sum_{j>i} w_j <g, c_j> + T_{n+1} <g, bg>
    tail = tr[:, -1] * (drgb @ bg)
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib + tail[:, None]
    ds = deltas * (tr[:, 1:] * here - suffix)
    return dc.astype(w.dtype), ds.astype(w.dtype)


try:
    if os.environ.get("NERFCL_KERNELS", "").lower() == "python":
        raise ImportError("fallback forced by NERFCL_KERNELS")
    from nerfcl import _kernels as _ext
except ImportError:
    _ext = None

BACKEND = "cython" if _ext is not None else "python"


def _contig(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def hash_encode_fwd(x, tables, resolutions, dense):
    dt = tables.dtype
    if _ext is None:
        return py_hash_encode_fwd(x.astype(dt, copy=False), tables, resolutions, dense)
    return _ext.hash_encode_fwd(_contig(x, dt), _contig(tables, dt),
                                _contig(resolutions, np.int64), _contig(dense, np.uint8))


def hash_encode_bwd(x, dfeat, grad, resolutions, dense):
    dt = grad.dtype
    if _ext is None:
        py_hash_encode_bwd(x.astype(dt, copy=False), dfeat.astype(dt, copy=False), grad,
                           resolutions, dense)
        return
    _ext.hash_encode_bwd(_contig(x, dt), _contig(dfeat, dt), grad,
                         _contig(resolutions, np.int64), _contig(dense, np.uint8))


def composite_fwd(colors, sigmas, deltas, bg):
    dt = sigmas.dtype
    bg = np.asarray(bg, dtype=dt)
    if _ext is None:
        return py_composite_fwd(colors.astype(dt, copy=False), sigmas, deltas.astype(dt, copy=False), bg)
    return _ext.composite_fwd(_contig(colors, dt), _contig(sigmas, dt), _contig(deltas, dt), _contig(bg, dt))


def composite_bwd(drgb, colors, deltas, w, tr, bg):
    dt = w.dtype
    bg = np.asarray(bg, dtype=dt)
    if _ext is None:
        return py_composite_bwd(drgb.astype(dt, copy=False), colors.astype(dt, copy=False),
                                deltas.astype(dt, copy=False), w, tr, bg)
    return _ext.composite_bwd(_contig(drgb, dt), _contig(colors, dt), _contig(deltas, dt),
                              _contig(w, dt), _contig(tr, dt), _contig(bg, dt))
