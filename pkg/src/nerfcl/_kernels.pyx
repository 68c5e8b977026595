# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops: hash-grid gather/scatter and per-ray compositing.

Every routine mirrors a numpy function in ``nerfcl.kernels`` and must stay
numerically interchangeable with it (same corner order, same hash).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport expm1, floor
from libc.stdint cimport uint64_t, int64_t

ctypedef fused real:
    float
    double

cdef uint64_t PRIME_Y = 2654435761ULL
cdef uint64_t PRIME_Z = 805459861ULL


cdef inline int64_t _corner_index(int64_t i, int64_t j, int64_t k, int64_t res,
                                  int dense, uint64_t mask) noexcept nogil:
    cdef int64_t side
    if dense:
        side = res + 1
        return i + side * (j + side * k)
    return <int64_t>(((<uint64_t>i) ^ ((<uint64_t>j) * PRIME_Y) ^ ((<uint64_t>k) * PRIME_Z)) & mask)


cdef inline void _cell(real x, int64_t res, int64_t* i0, real* w) noexcept nogil:
    cdef real pos = x * res
    cdef int64_t i = <int64_t>floor(pos)
    if i > res - 1:
        i = res - 1
    if i < 0:
        i = 0
    i0[0] = i
    w[0] = pos - i


def hash_encode_fwd(real[:, ::1] x, real[:, :, ::1] tables,
                    cnp.int64_t[::1] resolutions, cnp.uint8_t[::1] dense):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t levels = tables.shape[0]
    cdef Py_ssize_t tsize = tables.shape[1]
    cdef Py_ssize_t nf = tables.shape[2]
    cdef uint64_t mask = <uint64_t>(tsize - 1)
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, levels * nf), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t p, l, c, f
    cdef int64_t res, ix, iy, iz, idx
    cdef int dn
    cdef real wx, wy, wz, cw
    with nogil:
        for p in range(n):
            for l in range(levels):
                res = resolutions[l]
                dn = dense[l]
                _cell(x[p, 0], res, &ix, &wx)
                _cell(x[p, 1], res, &iy, &wy)
                _cell(x[p, 2], res, &iz, &wz)
                for c in range(8):
                    cw = (wx if (c & 1) else 1 - wx) * (wy if (c & 2) else 1 - wy) * (wz if (c & 4) else 1 - wz)
                    idx = _corner_index(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1),
                                        res, dn, mask)
                    for f in range(nf):
                        out[p, l * nf + f] += cw * tables[l, idx, f]
    return out_arr


def hash_encode_bwd(real[:, ::1] x, real[:, ::1] dfeat, real[:, :, ::1] grad,
                    cnp.int64_t[::1] resolutions, cnp.uint8_t[::1] dense):
    """Accumulate dL/dtable into ``grad`` in place (sequential point order)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t levels = grad.shape[0]
    cdef Py_ssize_t tsize = grad.shape[1]
    cdef Py_ssize_t nf = grad.shape[2]
    cdef uint64_t mask = <uint64_t>(tsize - 1)
    cdef Py_ssize_t p, l, c, f
    cdef int64_t res, ix, iy, iz, idx
    cdef int dn
    cdef real wx, wy, wz, cw
    with nogil:
        for p in range(n):
            for l in range(levels):
                res = resolutions[l]
                dn = dense[l]
                _cell(x[p, 0], res, &ix, &wx)
                _cell(x[p, 1], res, &iy, &wy)
                _cell(x[p, 2], res, &iz, &wz)
                for c in range(8):
                    cw = (wx if (c & 1) else 1 - wx) * (wy if (c & 2) else 1 - wy) * (wz if (c & 4) else 1 - wz)
                    idx = _corner_index(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1),
                                        res, dn, mask)
                    for f in range(nf):
                        grad[l, idx, f] += cw * dfeat[p, l * nf + f]


def composite_fwd(real[:, :, ::1] colors, real[:, ::1] sigmas, real[:, ::1] deltas, real[::1] bg):
    """Returns (rgb, weights, transmittance) with transmittance[:, n] the residual."""
    cdef Py_ssize_t r = sigmas.shape[0]
    cdef Py_ssize_t n = sigmas.shape[1]
    dtype = np.float32 if real is float else np.float64
    rgb_arr = np.empty((r, 3), dtype=dtype)
    w_arr = np.empty((r, n), dtype=dtype)
    tr_arr = np.empty((r, n + 1), dtype=dtype)
    cdef real[:, ::1] rgb = rgb_arr
    cdef real[:, ::1] w = w_arr
    cdef real[:, ::1] tr = tr_arr
    cdef Py_ssize_t i, k, ch
    cdef double a, e, t_i, out0, out1, out2
    with nogil:
        for k in range(r):
            out0 = 0.0
            out1 = 0.0
            out2 = 0.0
            t_i = 1.0
            for i in range(n):
                # one transcendental per sample: alpha and the transmittance step share it
                e = expm1(-sigmas[k, i] * deltas[k, i])
                a = -t_i * e
                tr[k, i] = t_i
                w[k, i] = a
                out0 = out0 + a * colors[k, i, 0]
                out1 = out1 + a * colors[k, i, 1]
                out2 = out2 + a * colors[k, i, 2]
                t_i = t_i * (1.0 + e)
            tr[k, n] = t_i
            rgb[k, 0] = out0 + t_i * bg[0]
            rgb[k, 1] = out1 + t_i * bg[1]
            rgb[k, 2] = out2 + t_i * bg[2]
    return rgb_arr, w_arr, tr_arr


def composite_bwd(real[:, ::1] drgb, real[:, :, ::1] colors, real[:, ::1] deltas,
                  real[:, ::1] w, real[:, ::1] tr, real[::1] bg):
    """Gradients of the composited rgb w.r.t. per-sample colors and densities."""
    cdef Py_ssize_t r = w.shape[0]
    cdef Py_ssize_t n = w.shape[1]
    dtype = np.float32 if real is float else np.float64
    dc_arr = np.empty((r, n, 3), dtype=dtype)
    ds_arr = np.empty((r, n), dtype=dtype)
    cdef real[:, :, ::1] dc = dc_arr
    cdef real[:, ::1] ds = ds_arr
    cdef Py_ssize_t i, k
    cdef double g0, g1, g2, suffix, here
    with nogil:
        for k in range(r):
            g0 = drgb[k, 0]
            g1 = drgb[k, 1]
            g2 = drgb[k, 2]
            # suffix holds sum_{j>i} w_j <g, c_j> + T_{n+1} <g, bg>
            suffix = tr[k, n] * (g0 * bg[0] + g1 * bg[1] + g2 * bg[2])
            for i in range(n - 1, -1, -1):
                dc[k, i, 0] = w[k, i] * g0
                dc[k, i, 1] = w[k, i] * g1
                dc[k, i, 2] = w[k, i] * g2
                here = g0 * colors[k, i, 0] + g1 * colors[k, i, 1] + g2 * colors[k, i, 2]
                ds[k, i] = deltas[k, i] * (tr[k, i + 1] * here - suffix)
                suffix = suffix + w[k, i] * here
    return dc_arr, ds_arr
