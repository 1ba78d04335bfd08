# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused, sequential, deterministic.

Semantics match numpy_backend (within floating-point reassociation).
Non-conforming inputs (wrong ndim/dtype) fall back to the numpy versions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt

from . import numpy_backend as _nb

cnp.import_array()

NAME = "core"

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


cdef inline bint _is_c2d(object a):
    return (
        isinstance(a, np.ndarray)
        and (<cnp.ndarray> a).ndim == 2
        and a.dtype == np.float64
        and a.flags.c_contiguous
    )


cdef inline bint _is_c1d(object a):
    return (
        isinstance(a, np.ndarray)
        and (<cnp.ndarray> a).ndim == 1
        and a.dtype == np.float64
        and a.flags.c_contiguous
    )


# ------------------------------------------------------------------- silu


def silu_fwd(x):
    if not (_is_c2d(x) or _is_c1d(x)):
        return _nb.silu_fwd(x)
    shape = x.shape
    flat = x.reshape(-1)
    cdef f64[::1] xv = flat
    y = np.empty_like(flat)
    sg = np.empty_like(flat)
    cdef f64[::1] yv = y
    cdef f64[::1] sv = sg
    if xv.shape[0] > 0:
        _silu_flat(&xv[0], &yv[0], &sv[0], xv.shape[0])
    return y.reshape(shape), sg.reshape(shape)


def silu_bwd(g, x, sig):
    if not ((_is_c2d(g) or _is_c1d(g)) and g.shape == x.shape == sig.shape):
        return _nb.silu_bwd(g, x, sig)
    shape = g.shape
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    sf = sig.reshape(-1)
    cdef f64[::1] gv = gf
    cdef f64[::1] xv = xf
    cdef f64[::1] sv = sf
    out = np.empty_like(gf)
    cdef f64[::1] ov = out
    cdef Py_ssize_t i, n = gv.shape[0]
    cdef f64 s
    for i in range(n):
        s = sv[i]
        ov[i] = gv[i] * (s + xv[i] * s * (1.0 - s))
    return out.reshape(shape)


# ------------------------------------------------------------ segment sums


def segment_sum(values, starts):
    if not (_is_c2d(values) and starts.dtype == np.int64):
        return _nb.segment_sum(values, starts)
    cdef f64[:, ::1] v = values
    cdef i64[::1] st = starts
    cdef Py_ssize_t n_seg = st.shape[0] - 1
    cdef Py_ssize_t w = v.shape[1]
    out = np.zeros((n_seg, w))
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t s, r, c
    for s in range(n_seg):
        for r in range(st[s], st[s + 1]):
            for c in range(w):
                o[s, c] += v[r, c]
    return out


def segment_sum_bwd(g, starts):
    if not (_is_c2d(g) and starts.dtype == np.int64):
        return _nb.segment_sum_bwd(g, starts)
    cdef f64[:, ::1] gv = g
    cdef i64[::1] st = starts
    cdef Py_ssize_t n_seg = st.shape[0] - 1
    cdef Py_ssize_t w = gv.shape[1]
    out = np.empty((st[n_seg], w))
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t s, r, c
    for s in range(n_seg):
        for r in range(st[s], st[s + 1]):
            for c in range(w):
                o[r, c] = gv[s, c]
    return out


# ---------------------------------------------------------- gather/scatter


def gather_rows(values, idx):
    if not (_is_c2d(values) and idx.dtype == np.int64):
        return _nb.gather_rows(values, idx)
    cdef f64[:, ::1] v = values
    cdef i64[::1] ix = idx
    cdef Py_ssize_t e = ix.shape[0]
    cdef Py_ssize_t w = v.shape[1]
    out = np.empty((e, w))
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t i, c
    for i in range(e):
        for c in range(w):
            o[i, c] = v[ix[i], c]
    return out


def scatter_add_rows(g, idx, n_rows):
    if not (_is_c2d(g) and idx.dtype == np.int64):
        return _nb.scatter_add_rows(g, idx, n_rows)
    cdef f64[:, ::1] gv = g
    cdef i64[::1] ix = idx
    cdef Py_ssize_t e = ix.shape[0]
    cdef Py_ssize_t w = gv.shape[1]
    out = np.zeros((n_rows, w))
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t i, c
    for i in range(e):
        for c in range(w):
            o[ix[i], c] += gv[i, c]
    return out


# ------------------------------------------------------------ edge kernels


def edge_sqdist(x, src, dst):
    if not (_is_c2d(x) and x.shape[1] == 3):
        return _nb.edge_sqdist(x, src, dst)
    cdef f64[:, ::1] xv = x
    cdef i64[::1] sv = src
    cdef i64[::1] dv = dst
    cdef Py_ssize_t e = sv.shape[0]
    out = np.empty(e)
    cdef f64[::1] o = out
    cdef Py_ssize_t i
    cdef f64 a, b, c
    for i in range(e):
        a = xv[dv[i], 0] - xv[sv[i], 0]
        b = xv[dv[i], 1] - xv[sv[i], 1]
        c = xv[dv[i], 2] - xv[sv[i], 2]
        o[i] = a * a + b * b + c * c
    return out


def edge_sqdist_bwd(g, x, src, dst):
    if not (_is_c2d(x) and x.shape[1] == 3 and _is_c1d(g)):
        return _nb.edge_sqdist_bwd(g, x, src, dst)
    cdef f64[::1] gv = g
    cdef f64[:, ::1] xv = x
    cdef i64[::1] sv = src
    cdef i64[::1] dv = dst
    cdef Py_ssize_t e = sv.shape[0]
    gx = np.zeros_like(x)
    cdef f64[:, ::1] o = gx
    cdef Py_ssize_t i, k
    cdef f64 gd
    for i in range(e):
        for k in range(3):
            gd = 2.0 * gv[i] * (xv[dv[i], k] - xv[sv[i], k])
            o[dv[i], k] += gd
            o[sv[i], k] -= gd
    return gx


cdef void _silu_flat(const f64* x, f64* y, f64* s, Py_ssize_t n) noexcept nogil:
    # select on the numerator keeps the loop branch-free (vectorizable exp)
    # while matching the two-sided stable formula exactly
    cdef Py_ssize_t i
    cdef f64 e, num, ge
    for i in range(n):
        e = exp(-fabs(x[i]))
        num = 1.0 if x[i] >= 0 else e
        ge = num / (1.0 + e)
        s[i] = ge
        y[i] = x[i] * ge


DEF MSG_TILE = 256


def edge_message_silu(hd, hs, d2, src, dst, wd2):
    if not (_is_c2d(hd) and _is_c2d(hs) and _is_c1d(d2) and _is_c1d(wd2)):
        return _nb.edge_message_silu(hd, hs, d2, src, dst, wd2)
    cdef f64[:, ::1] hdv = hd
    cdef f64[:, ::1] hsv = hs
    cdef f64[::1] dv2 = d2
    cdef f64[::1] wv = wd2
    cdef i64[::1] sv = src
    cdef i64[::1] dv = dst
    cdef Py_ssize_t e = sv.shape[0]
    cdef Py_ssize_t w = hdv.shape[1]
    m = np.empty((e, w))
    cdef f64[:, ::1] mv = m
    # cache-resident tile of pre-activations; recomputed in the backward pass
    scratch = np.empty((MSG_TILE, w))
    cdef f64[:, ::1] pv = scratch
    sig = np.empty((MSG_TILE, w))
    cdef f64[:, ::1] gv = sig
    cdef Py_ssize_t i0, i, c, rows, r
    cdef f64 dd
    i0 = 0
    while i0 < e:
        rows = min(<Py_ssize_t> MSG_TILE, e - i0)
        for r in range(rows):
            i = i0 + r
            dd = dv2[i]
            for c in range(w):
                pv[r, c] = hdv[dv[i], c] + hsv[sv[i], c] + dd * wv[c]
        _silu_flat(&pv[0, 0], &mv[i0, 0], &gv[0, 0], rows * w)
        i0 += rows
    return m


def edge_message_silu_bwd(g, hd, hs, d2, src, dst, wd2):
    if not (_is_c2d(g) and _is_c2d(hd) and _is_c2d(hs)):
        return _nb.edge_message_silu_bwd(g, hd, hs, d2, src, dst, wd2)
    cdef f64[:, ::1] gv = g
    cdef f64[:, ::1] hdv = hd
    cdef f64[:, ::1] hsv = hs
    cdef f64[::1] dv2 = d2
    cdef f64[::1] wv = wd2
    cdef i64[::1] sv = src
    cdef i64[::1] dv = dst
    cdef Py_ssize_t e = sv.shape[0]
    cdef Py_ssize_t w = gv.shape[1]
    ghd = np.zeros_like(hd)
    ghs = np.zeros_like(hs)
    gd2 = np.empty(e)
    gwd2 = np.zeros(w)
    cdef f64[:, ::1] ghdv = ghd
    cdef f64[:, ::1] ghsv = ghs
    cdef f64[::1] gd2v = gd2
    cdef f64[::1] gwv = gwd2
    pre = np.empty((MSG_TILE, w))
    y = np.empty((MSG_TILE, w))
    sig = np.empty((MSG_TILE, w))
    cdef f64[:, ::1] pv = pre
    cdef f64[:, ::1] yv = y
    cdef f64[:, ::1] sgv = sig
    cdef Py_ssize_t i0, i, c, rows, r
    cdef f64 s, gp, acc, dd
    i0 = 0
    while i0 < e:
        rows = min(<Py_ssize_t> MSG_TILE, e - i0)
        for r in range(rows):
            i = i0 + r
            dd = dv2[i]
            for c in range(w):
                pv[r, c] = hdv[dv[i], c] + hsv[sv[i], c] + dd * wv[c]
        _silu_flat(&pv[0, 0], &yv[0, 0], &sgv[0, 0], rows * w)
        for r in range(rows):
            i = i0 + r
            acc = 0.0
            for c in range(w):
                s = sgv[r, c]
                gp = gv[i, c] * (s + pv[r, c] * s * (1.0 - s))
                ghdv[dv[i], c] += gp
                ghsv[sv[i], c] += gp
                acc += gp * wv[c]
                gwv[c] += gp * dv2[i]
            gd2v[i] = acc
        i0 += rows
    return ghd, ghs, gd2, gwd2


def coord_step(x, s, src, dst, seg_starts):
    if not (_is_c2d(x) and x.shape[1] == 3 and _is_c2d(s) and s.shape[1] == 1):
        return _nb.coord_step(x, s, src, dst, seg_starts)
    cdef f64[:, ::1] xv = x
    cdef f64[:, ::1] sv_ = s
    cdef i64[::1] srcv = src
    cdef i64[::1] dstv = dst
    cdef i64[::1] st = seg_starts
    cdef Py_ssize_t n_seg = st.shape[0] - 1
    out = np.zeros((n_seg, 3))
    cdef f64[:, ::1] o = out
    cdef Py_ssize_t seg, i
    cdef f64 a, b, c, d, f
    for seg in range(n_seg):
        for i in range(st[seg], st[seg + 1]):
            a = xv[dstv[i], 0] - xv[srcv[i], 0]
            b = xv[dstv[i], 1] - xv[srcv[i], 1]
            c = xv[dstv[i], 2] - xv[srcv[i], 2]
            d = sqrt(a * a + b * b + c * c)
            f = sv_[i, 0] / (d + 1.0)
            o[seg, 0] += a * f
            o[seg, 1] += b * f
            o[seg, 2] += c * f
    return out


def coord_step_bwd(g, x, s, src, dst, seg_starts):
    if not (_is_c2d(g) and _is_c2d(x) and x.shape[1] == 3 and _is_c2d(s)):
        return _nb.coord_step_bwd(g, x, s, src, dst, seg_starts)
    cdef f64[:, ::1] gv = g
    cdef f64[:, ::1] xv = x
    cdef f64[:, ::1] sv_ = s
    cdef i64[::1] srcv = src
    cdef i64[::1] dstv = dst
    cdef i64[::1] st = seg_starts
    cdef Py_ssize_t n_seg = st.shape[0] - 1
    cdef Py_ssize_t e = srcv.shape[0]
    gx = np.zeros_like(x)
    gs = np.empty((e, 1))
    cdef f64[:, ::1] gxv = gx
    cdef f64[:, ::1] gsv = gs
    cdef Py_ssize_t seg, i, k
    cdef f64 a, b, c, d, inv, ga, gb, gc, dot, coef
    cdef f64 u0, u1, u2
    for seg in range(n_seg):
        for i in range(st[seg], st[seg + 1]):
            a = xv[dstv[i], 0] - xv[srcv[i], 0]
            b = xv[dstv[i], 1] - xv[srcv[i], 1]
            c = xv[dstv[i], 2] - xv[srcv[i], 2]
            d = sqrt(a * a + b * b + c * c)
            inv = 1.0 / (d + 1.0)
            u0 = a * inv
            u1 = b * inv
            u2 = c * inv
            gsv[i, 0] = u0 * gv[seg, 0] + u1 * gv[seg, 1] + u2 * gv[seg, 2]
            # gu = s * g, then gdiff = gu/(d+1) - diff (diff . gu)/(d (d+1)^2)
            ga = sv_[i, 0] * gv[seg, 0]
            gb = sv_[i, 0] * gv[seg, 1]
            gc = sv_[i, 0] * gv[seg, 2]
            dot = a * ga + b * gb + c * gc
            if d > 1e-12:
                coef = dot / (d * (d + 1.0) * (d + 1.0))
            else:
                coef = 0.0
            ga = ga * inv - a * coef
            gb = gb * inv - b * coef
            gc = gc * inv - c * coef
            gxv[dstv[i], 0] += ga
            gxv[dstv[i], 1] += gb
            gxv[dstv[i], 2] += gc
            gxv[srcv[i], 0] -= ga
            gxv[srcv[i], 1] -= gb
            gxv[srcv[i], 2] -= gc
    return gx, gs
