"""Grid primitives: attention normalization, divergence, resampling, mask moments.

Grids are plain 2-D ``float64`` ndarrays indexed ``[row, col]``. Pixel and
token coordinates are ``(x, y) = (col, row)`` with cell centers at integer
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from promptloop import kernels
from promptloop.errors import EmptyMaskError, InvalidInputError

EPS = 1e-8


@dataclass(frozen=True)
class EpsilonPolicy:
    eps: float = EPS

    def __post_init__(self):
        if not (0.0 < self.eps <= 1e-4):
            raise InvalidInputError(f"eps must lie in (0, 1e-4], got {self.eps}")


@dataclass(frozen=True)
class Prompt:
    """Centroid ``(x, y)`` plus box ``(x1, y1, x2, y2)`` in pixels."""

    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]
    image_diag: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if x1 > x2 or y1 > y2:
            raise InvalidInputError(f"bbox corners out of order: {self.bbox}")
        if not self.image_diag > 0:
            raise InvalidInputError("image_diag must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([*self.centroid, *self.bbox], dtype=np.float64)

    @classmethod
    def from_array(cls, values, image_diag: float) -> "Prompt":
        v = [float(x) for x in values]
        return cls((v[0], v[1]), (v[2], v[3], v[4], v[5]), image_diag)


def _as_grid(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")


def normalize_attention(raw, eps: float = EPS) -> np.ndarray:
    """Min-max rescale to [0, 1], then rescale to unit sum.

    A grid whose range is below ``eps`` carries no spatial preference and
    maps to the uniform distribution.
    """
    arr = _as_grid(raw, "attention")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("attention contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < eps:
        return np.full(arr.shape, 1.0 / arr.size)
    scaled = (arr - lo) / (hi - lo)
    return scaled / scaled.sum()


def is_normalized(grid, tol: float = 1e-9) -> bool:
    arr = np.asarray(grid, dtype=np.float64)
    return bool(np.all(arr >= 0.0) and abs(arr.sum() - 1.0) <= tol)


def js_divergence(p, q, eps: float = EPS) -> float:
    """Jensen-Shannon divergence with base-2 logarithms, so the result is in [0, 1]."""
    p = _as_grid(p, "P")
    q = _as_grid(q, "Q")
    _check_same_shape(p, q)
    js = kernels.js_divergence(p, q, eps)
    return min(1.0, max(0.0, js))


@lru_cache(maxsize=64)
def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    # weights[i, k] = fraction of destination cell i covered by source cell k
    scale = n_src / n_dst
    edges = np.arange(n_dst + 1, dtype=np.float64) * scale
    src = np.arange(n_src, dtype=np.float64)
    lo = np.maximum(edges[:-1, None], src[None, :])
    hi = np.minimum(edges[1:, None], src[None, :] + 1.0)
    weights = np.clip(hi - lo, 0.0, None) / scale
    weights.setflags(write=False)
    return weights


def downsample_mask(full, target_h: int, target_w: int, mode: str = "area") -> np.ndarray:
    """Area-average (default) or nearest-neighbor resampling to a coarser grid."""
    arr = _as_grid(full, "mask")
    h, w = arr.shape
    if target_h < 1 or target_w < 1 or target_h > h or target_w > w:
        raise InvalidInputError(
            f"target {target_h}x{target_w} must be positive and no larger than source {h}x{w}"
        )
    if mode == "area":
        return _area_weights(h, target_h) @ arr @ _area_weights(w, target_w).T
    if mode == "nearest":
        rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(int), h - 1)
        cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(int), w - 1)
        return arr[np.ix_(rows, cols)].copy()
    raise InvalidInputError(f"unknown downsampling mode {mode!r}")


def upsample_attention(f, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers (corner alignment off)."""
    arr = _as_grid(f, "attention")
    h, w = arr.shape
    if target_h < h or target_w < w:
        raise InvalidInputError(
            f"target {target_h}x{target_w} smaller than source {h}x{w}"
        )
    return np.maximum(kernels.bilinear_upsample(arr, target_h, target_w), 0.0)


def box_from_mask(mask, threshold: float = 0.5) -> tuple[float, float, float, float]:
    arr = np.asarray(mask)
    rows = np.flatnonzero((arr > threshold).any(axis=1))
    cols = np.flatnonzero((arr > threshold).any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError(f"no cell exceeds {threshold}")
    return float(cols[0]), float(rows[0]), float(cols[-1]), float(rows[-1])


def mask_moments(mask, eps: float = EPS) -> tuple[tuple[float, float], tuple[float, float, float, float]]:
    """Soft-weighted centroid and the box of cells above 0.5.

    When no cell exceeds 0.5 the box collapses onto the centroid.
    """
    arr = _as_grid(mask, "mask")
    mass, cx, cy = kernels.weighted_moments(arr)
    if mass <= eps:
        raise EmptyMaskError(f"mask mass {mass:.3g} <= eps")
    try:
        bbox = box_from_mask(arr)
    except EmptyMaskError:
        bbox = (cx, cy, cx, cy)
    return (cx, cy), bbox


def weighted_centroid(weights) -> tuple[float, float, float]:
    """Return ``(mass, x, y)`` of a non-negative weight grid."""
    return kernels.weighted_moments(_as_grid(weights, "weights"))


def circular_shift(grid, dx: int, dy: int) -> np.ndarray:
    return np.roll(np.asarray(grid), shift=(int(dy), int(dx)), axis=(0, 1))


def image_diag(height: int, width: int) -> float:
    return math.hypot(height, width)


def pixel_to_token(x: float, y: float, image_hw: tuple[int, int], grid_hw: tuple[int, int]):
    """Map pixel-center coordinates to token-center coordinates (half-pixel convention)."""
    sy = image_hw[0] / grid_hw[0]
    sx = image_hw[1] / grid_hw[1]
    return (x + 0.5) / sx - 0.5, (y + 0.5) / sy - 0.5


def token_to_pixel(u: float, v: float, image_hw: tuple[int, int], grid_hw: tuple[int, int]):
    sy = image_hw[0] / grid_hw[0]
    sx = image_hw[1] / grid_hw[1]
    return (u + 0.5) * sx - 0.5, (v + 0.5) * sy - 0.5
