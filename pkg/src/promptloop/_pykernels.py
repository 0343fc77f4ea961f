"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating point semantics up to summation order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def js_divergence(p: np.ndarray, q: np.ndarray, eps: float) -> float:
    p = np.ascontiguousarray(p, dtype=np.float64).ravel()
    q = np.ascontiguousarray(q, dtype=np.float64).ravel()
    r = 0.5 * (p + q)
    log_r = np.log2(r + eps)
    kl_p = float(np.sum(p * (np.log2(p + eps) - log_r)))
    kl_q = float(np.sum(q * (np.log2(q + eps) - log_r)))
    return 0.5 * (kl_p + kl_q)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample(f: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    in_h, in_w = f.shape
    y0, y1, fy = _bilinear_axis(in_h, out_h)
    x0, x1, fx = _bilinear_axis(in_w, out_w)
    top = f[y0][:, x0] * (1.0 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1.0 - fx) + f[y1][:, x1] * fx
    return top * (1.0 - fy)[:, None] + bot * fy[:, None]


TAIL = 40.0  # logistic values below exp(-TAIL) are stored as exact zeros


def ellipse_window(h, w, cx, cy, rx, ry, gain):
    reach = np.sqrt(1.0 + TAIL / gain)
    i0 = max(0, int(np.floor(cy - ry * reach)))
    i1 = min(h, int(np.ceil(cy + ry * reach)) + 1)
    j0 = max(0, int(np.floor(cx - rx * reach)))
    j1 = min(w, int(np.ceil(cx + rx * reach)) + 1)
    return i0, max(i0, i1), j0, max(j0, j1)


def soft_ellipse(
    h: int, w: int, cx: float, cy: float, rx: float, ry: float, edge: float
) -> np.ndarray:
    gain = np.sqrt(rx * ry) / (2.0 * edge)
    out = np.zeros((h, w))
    i0, i1, j0, j1 = ellipse_window(h, w, cx, cy, rx, ry, gain)
    ys = (np.arange(i0, i1, dtype=np.float64) - cy) / ry
    xs = (np.arange(j0, j1, dtype=np.float64) - cx) / rx
    rho2 = ys[:, None] ** 2 + xs[None, :] ** 2
    out[i0:i1, j0:j1] = expit(gain * (1.0 - rho2))
    return out


def weighted_moments(wgt: np.ndarray) -> tuple[float, float, float]:
    wgt = np.asarray(wgt, dtype=np.float64)
    mass = float(wgt.sum())
    if mass == 0.0:
        return 0.0, 0.0, 0.0
    h, w = wgt.shape
    mx = float(wgt.sum(axis=0) @ np.arange(w, dtype=np.float64)) / mass
    my = float(wgt.sum(axis=1) @ np.arange(h, dtype=np.float64)) / mass
    return mass, mx, my


def signflip_exceed_mc(diffs: np.ndarray, signs: np.ndarray, tol: float) -> int:
    """Count sign patterns (rows of ``signs``, 1 = keep, 0 = flip) with |sum| >= |observed|."""
    d = np.asarray(diffs, dtype=np.float64)
    s = np.asarray(signs, dtype=np.float64) * 2.0 - 1.0
    obs = abs(float(d.sum()))
    perm = np.abs(s @ d)
    return int(np.count_nonzero(perm >= obs - tol))


def signflip_exceed_exact(diffs: np.ndarray, tol: float) -> int:
    """Count all 2**n sign patterns whose |sum| reaches the observed |sum|."""
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    obs = abs(float(d.sum()))
    total = float(d.sum())
    count = 0
    chunk = 1 << 15
    shifts = np.arange(n, dtype=np.int64)
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        bits = ((codes[:, None] >> shifts) & 1).astype(np.float64)
        # bit 1 keeps the sign, bit 0 flips it: sum = 2*(bits @ d) - total
        perm = np.abs(2.0 * (bits @ d) - total)
        count += int(np.count_nonzero(perm >= obs - tol))
    return count
