# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log2, exp, floor, sqrt, fabs

cnp.import_array()

from promptloop._pykernels import ellipse_window


def js_divergence(p, q, double eps):
    cdef const double[::1] pv = np.ascontiguousarray(p, dtype=np.float64).ravel()
    cdef const double[::1] qv = np.ascontiguousarray(q, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double kl_p = 0.0, kl_q = 0.0, r, log_r
    for i in range(n):
        r = 0.5 * (pv[i] + qv[i])
        log_r = log2(r + eps)
        kl_p += pv[i] * (log2(pv[i] + eps) - log_r)
        kl_q += qv[i] * (log2(qv[i] + eps) - log_r)
    return 0.5 * (kl_p + kl_q)


cdef void _axis(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t[::1] i0,
                Py_ssize_t[::1] i1, double[::1] frac) noexcept:
    cdef Py_ssize_t k, a
    cdef double src, scale = <double>n_in / <double>n_out
    for k in range(n_out):
        src = (k + 0.5) * scale - 0.5
        if src < 0.0:
            src = 0.0
        a = <Py_ssize_t>floor(src)
        if a > n_in - 1:
            a = n_in - 1
        i0[k] = a
        i1[k] = a + 1 if a + 1 < n_in else n_in - 1
        frac[k] = src - a


def bilinear_upsample(f, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, ::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef Py_ssize_t in_h = fv.shape[0], in_w = fv.shape[1]
    cdef Py_ssize_t[::1] y0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] fy = np.empty(out_h)
    cdef Py_ssize_t[::1] x0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] fx = np.empty(out_w)
    _axis(in_h, out_h, y0, y1, fy)
    _axis(in_w, out_w, x0, x1, fx)
    out = np.empty((out_h, out_w))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double top, bot
    for i in range(out_h):
        for j in range(out_w):
            top = fv[y0[i], x0[j]] * (1.0 - fx[j]) + fv[y0[i], x1[j]] * fx[j]
            bot = fv[y1[i], x0[j]] * (1.0 - fx[j]) + fv[y1[i], x1[j]] * fx[j]
            ov[i, j] = top * (1.0 - fy[i]) + bot * fy[i]
    return out


def soft_ellipse(Py_ssize_t h, Py_ssize_t w, double cx, double cy, double rx,
                 double ry, double edge):
    out = np.zeros((h, w))
    cdef double[:, ::1] ov = out
    cdef double gain = sqrt(rx * ry) / (2.0 * edge)
    cdef double dy, dx, z
    cdef Py_ssize_t i, j, i0, i1, j0, j1
    i0, i1, j0, j1 = ellipse_window(h, w, cx, cy, rx, ry, gain)
    for i in range(i0, i1):
        dy = (i - cy) / ry
        for j in range(j0, j1):
            dx = (j - cx) / rx
            z = gain * (1.0 - dy * dy - dx * dx)
            if z >= 0.0:
                ov[i, j] = 1.0 / (1.0 + exp(-z))
            else:
                ov[i, j] = exp(z) / (1.0 + exp(z))
    return out


def weighted_moments(wgt):
    cdef const double[:, ::1] wv = np.ascontiguousarray(wgt, dtype=np.float64)
    cdef Py_ssize_t i, j, h = wv.shape[0], w = wv.shape[1]
    cdef double mass = 0.0, sx = 0.0, sy = 0.0, row
    for i in range(h):
        row = 0.0
        for j in range(w):
            row += wv[i, j]
            sx += wv[i, j] * j
        mass += row
        sy += row * i
    if mass == 0.0:
        return 0.0, 0.0, 0.0
    return mass, sx / mass, sy / mass


def signflip_exceed_mc(diffs, signs, double tol):
    cdef const double[::1] d = np.ascontiguousarray(diffs, dtype=np.float64)
    cdef const cnp.uint8_t[:, ::1] s = np.ascontiguousarray(signs, dtype=np.uint8)
    cdef Py_ssize_t r, i, n = d.shape[0], n_perm = s.shape[0]
    cdef double total = 0.0, obs, kept
    cdef long count = 0
    for i in range(n):
        total += d[i]
    obs = fabs(total)
    for r in range(n_perm):
        # branchless: signed sum = 2 * (sum of kept entries) - total
        kept = 0.0
        for i in range(n):
            kept += s[r, i] * d[i]
        if fabs(2.0 * kept - total) >= obs - tol:
            count += 1
    return count


def signflip_exceed_exact(diffs, double tol):
    # Gray-code walk: consecutive patterns differ in one sign.
    cdef const double[::1] d = np.ascontiguousarray(diffs, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    cdef unsigned long long code, total = 1ULL << n, gray, prev = 0, changed
    cdef int bit
    cdef double acc = 0.0, obs
    cdef long count = 0
    cdef Py_ssize_t i
    # start from all-flipped (code 0), matching the numpy enumeration's bit semantics
    for i in range(n):
        acc -= d[i]
    obs = fabs(acc)
    if fabs(acc) >= obs - tol:
        count += 1
    for code in range(1, total):
        gray = code ^ (code >> 1)
        changed = gray ^ prev
        bit = 0
        while (changed >> bit) != 1:
            bit += 1
        if gray & changed:
            acc += 2.0 * d[bit]
        else:
            acc -= 2.0 * d[bit]
        prev = gray
        if fabs(acc) >= obs - tol:
            count += 1
    return count
