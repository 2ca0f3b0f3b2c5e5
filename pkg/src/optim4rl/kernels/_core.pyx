# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled fused GRU/LSTM cell kernels.

Same math and gate packing as kernels.numpy_backend.  Every inner
product accumulates in ascending index order, so a batch of n rows is
bit-identical to n single-row calls within this backend.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh

from .numpy_backend import check_cell_shapes

cnp.import_array()


cdef inline double _sigmoid(double v) noexcept nogil:
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    return exp(v) / (1.0 + exp(v))


cdef void _mm(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # outSize (n, m) must arrive zeroed; i,k,j order keeps rows of b hot
    # while each out[i, j] still accumulates over k in ascending order.
    cdef Py_ssize_t n = a.shape[0], kk = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(n):
        for k in range(kk):
            aik = a[i, k]
            for j in range(m):
                out[i, j] += aik * b[k, j]


cdef void _mm_t(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # out = a.T @ b, shapes (I, m) from a (n, I), b (n, m); out arrives zeroed.
    cdef Py_ssize_t n = a.shape[0], ii = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aki
    for k in range(n):
        for i in range(ii):
            aki = a[k, i]
            for j in range(m):
                out[i, j] += aki * b[k, j]


cdef void _mm_bt(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # out = a @ b.T, shapes (n, I) from a (n, m), b (I, m); out arrives zeroed.
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], ii = b.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for j in range(ii):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * b[j, k]
            out[i, j] = acc


def gru_cell_forward(cnp.ndarray x_in, cnp.ndarray h_in, cnp.ndarray wx_in, cnp.ndarray wh_in, cnp.ndarray b_in):
    x = np.ascontiguousarray(x_in, dtype=np.float64)
    h = np.ascontiguousarray(h_in, dtype=np.float64)
    wx = np.ascontiguousarray(wx_in, dtype=np.float64)
    wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    b = np.ascontiguousarray(b_in, dtype=np.float64)
    # mismatched rows would be read out of bounds below (boundscheck off)
    check_cell_shapes("gru_cell_forward", x, h, wx, wh, b, 3)
    cdef Py_ssize_t n = x.shape[0], H = h.shape[1]
    ax = np.zeros((n, 3 * H), dtype=np.float64)
    ah = np.zeros((n, 3 * H), dtype=np.float64)
    _mm(x, wx, ax)
    _mm(h, wh, ah)
    r = np.empty((n, H), dtype=np.float64)
    z = np.empty((n, H), dtype=np.float64)
    nn = np.empty((n, H), dtype=np.float64)
    hn = np.empty((n, H), dtype=np.float64)
    h_new = np.empty((n, H), dtype=np.float64)
    cdef double[:, ::1] axv = ax, ahv = ah, rv = r, zv = z, nv = nn, hnv = hn, hv = h, outv = h_new
    cdef double[::1] bv = b
    cdef Py_ssize_t i, j
    cdef double rr, zz, cand
    with nogil:
        for i in range(n):
            for j in range(H):
                rr = _sigmoid(axv[i, j] + bv[j] + ahv[i, j])
                zz = _sigmoid(axv[i, H + j] + bv[H + j] + ahv[i, H + j])
                hnv[i, j] = ahv[i, 2 * H + j]
                cand = tanh(axv[i, 2 * H + j] + bv[2 * H + j] + rr * hnv[i, j])
                rv[i, j] = rr
                zv[i, j] = zz
                nv[i, j] = cand
                outv[i, j] = (1.0 - zz) * cand + zz * hv[i, j]
    return h_new, (x, h, wx, wh, r, z, nn, hn)


def gru_cell_backward(cnp.ndarray dh_new_in, cache):
    x, h, wx, wh, r, z, nn, hn = cache
    dh_new = np.ascontiguousarray(dh_new_in, dtype=np.float64)
    if dh_new.shape != h.shape:
        raise ValueError(f"gru_cell_backward: dh_new{dh_new.shape} vs h{h.shape}")
    cdef Py_ssize_t n = x.shape[0], I = x.shape[1], H = h.shape[1]
    gx = np.empty((n, 3 * H), dtype=np.float64)
    gh = np.empty((n, 3 * H), dtype=np.float64)
    dh = np.empty((n, H), dtype=np.float64)
    cdef double[:, ::1] gxv = gx, ghv = gh, dhv = dh, dhn = dh_new
    cdef double[:, ::1] rv = r, zv = z, nv = nn, hnv = hn, hv = h
    cdef Py_ssize_t i, j
    cdef double dz, dn, da_n, dr, da_r, da_z
    with nogil:
        for i in range(n):
            for j in range(H):
                dz = dhn[i, j] * (hv[i, j] - nv[i, j])
                dn = dhn[i, j] * (1.0 - zv[i, j])
                dhv[i, j] = dhn[i, j] * zv[i, j]
                da_n = dn * (1.0 - nv[i, j] * nv[i, j])
                dr = da_n * hnv[i, j]
                da_r = dr * rv[i, j] * (1.0 - rv[i, j])
                da_z = dz * zv[i, j] * (1.0 - zv[i, j])
                gxv[i, j] = da_r
                gxv[i, H + j] = da_z
                gxv[i, 2 * H + j] = da_n
                ghv[i, j] = da_r
                ghv[i, H + j] = da_z
                ghv[i, 2 * H + j] = da_n * rv[i, j]
    dwx = np.zeros((I, 3 * H), dtype=np.float64)
    dwh = np.zeros((H, 3 * H), dtype=np.float64)
    dx = np.zeros((n, I), dtype=np.float64)
    dh_prev = np.zeros((n, H), dtype=np.float64)
    _mm_t(x, gx, dwx)
    _mm_t(h, gh, dwh)
    _mm_bt(gx, wx, dx)
    _mm_bt(gh, wh, dh_prev)
    db = gx.sum(axis=0)
    return dx, dh + dh_prev, dwx, dwh, db


def lstm_cell_forward(cnp.ndarray x_in, cnp.ndarray h_in, cnp.ndarray c_in, cnp.ndarray wx_in, cnp.ndarray wh_in, cnp.ndarray b_in):
    x = np.ascontiguousarray(x_in, dtype=np.float64)
    h = np.ascontiguousarray(h_in, dtype=np.float64)
    c = np.ascontiguousarray(c_in, dtype=np.float64)
    wx = np.ascontiguousarray(wx_in, dtype=np.float64)
    wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    b = np.ascontiguousarray(b_in, dtype=np.float64)
    check_cell_shapes("lstm_cell_forward", x, h, wx, wh, b, 4)
    if c.shape != h.shape:
        raise ValueError(f"lstm_cell_forward: c{c.shape} vs h{h.shape}")
    cdef Py_ssize_t n = x.shape[0], H = h.shape[1]
    a = np.zeros((n, 4 * H), dtype=np.float64)
    _mm(x, wx, a)
    ah = np.zeros((n, 4 * H), dtype=np.float64)
    _mm(h, wh, ah)
    ig = np.empty((n, H), dtype=np.float64)
    fg = np.empty((n, H), dtype=np.float64)
    gg = np.empty((n, H), dtype=np.float64)
    og = np.empty((n, H), dtype=np.float64)
    c_new = np.empty((n, H), dtype=np.float64)
    h_new = np.empty((n, H), dtype=np.float64)
    cdef double[:, ::1] av = a, ahv = ah, iv = ig, fv = fg, gv = gg, ov = og
    cdef double[:, ::1] cv = c, cnv = c_new, hnv = h_new
    cdef double[::1] bv = b
    cdef Py_ssize_t i, j
    cdef double ii, ff, gg_, oo, cc
    with nogil:
        for i in range(n):
            for j in range(H):
                ii = _sigmoid(av[i, j] + ahv[i, j] + bv[j])
                ff = _sigmoid(av[i, H + j] + ahv[i, H + j] + bv[H + j])
                gg_ = tanh(av[i, 2 * H + j] + ahv[i, 2 * H + j] + bv[2 * H + j])
                oo = _sigmoid(av[i, 3 * H + j] + ahv[i, 3 * H + j] + bv[3 * H + j])
                cc = ff * cv[i, j] + ii * gg_
                iv[i, j] = ii
                fv[i, j] = ff
                gv[i, j] = gg_
                ov[i, j] = oo
                cnv[i, j] = cc
                hnv[i, j] = oo * tanh(cc)
    return h_new, c_new, (x, h, c, wx, wh, ig, fg, gg, og, c_new)


def lstm_cell_backward(cnp.ndarray dh_new_in, cnp.ndarray dc_new_in, cache):
    x, h, c, wx, wh, ig, fg, gg, og, c_new = cache
    dh_new = np.ascontiguousarray(dh_new_in, dtype=np.float64)
    dc_new = np.ascontiguousarray(dc_new_in, dtype=np.float64)
    if dh_new.shape != h.shape or dc_new.shape != h.shape:
        raise ValueError(f"lstm_cell_backward: dh_new{dh_new.shape} dc_new{dc_new.shape} vs h{h.shape}")
    cdef Py_ssize_t n = x.shape[0], I = x.shape[1], H = h.shape[1]
    da = np.empty((n, 4 * H), dtype=np.float64)
    dc = np.empty((n, H), dtype=np.float64)
    cdef double[:, ::1] dav = da, dcv = dc, dhn = dh_new, dcn = dc_new
    cdef double[:, ::1] iv = ig, fv = fg, gv = gg, ov = og, cv = c, cnv = c_new
    cdef Py_ssize_t i, j
    cdef double tc, dct, di, df, dg, do
    with nogil:
        for i in range(n):
            for j in range(H):
                tc = tanh(cnv[i, j])
                do = dhn[i, j] * tc
                dct = dcn[i, j] + dhn[i, j] * ov[i, j] * (1.0 - tc * tc)
                di = dct * gv[i, j]
                df = dct * cv[i, j]
                dg = dct * iv[i, j]
                dcv[i, j] = dct * fv[i, j]
                dav[i, j] = di * iv[i, j] * (1.0 - iv[i, j])
                dav[i, H + j] = df * fv[i, j] * (1.0 - fv[i, j])
                dav[i, 2 * H + j] = dg * (1.0 - gv[i, j] * gv[i, j])
                dav[i, 3 * H + j] = do * ov[i, j] * (1.0 - ov[i, j])
    dwx = np.zeros((I, 4 * H), dtype=np.float64)
    dwh = np.zeros((H, 4 * H), dtype=np.float64)
    dx = np.zeros((n, I), dtype=np.float64)
    dh = np.zeros((n, H), dtype=np.float64)
    _mm_t(x, da, dwx)
    _mm_t(h, da, dwh)
    _mm_bt(da, wx, dx)
    _mm_bt(da, wh, dh)
    db = da.sum(axis=0)
    return dx, dh, dc, dwx, dwh, db
