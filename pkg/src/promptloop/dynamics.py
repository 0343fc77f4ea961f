"""Prompt-space dynamics of the feedback loop.

A loop map takes ``(t, p)`` and returns the next prompt vector. Prompt
vectors are 6 reals ``(cx, cy, x1, y1, x2, y2)`` with x coordinates divided
by the image width and y coordinates by the image height.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from promptloop.errors import InvalidInputError, JacobianEvaluationError, NumericalFailure
from promptloop.grid import Prompt, image_diag

LoopMap = Callable[[int, np.ndarray], np.ndarray]

EIG_TOL = 1e-8
EIG_MAX_ITER = 10_000


@dataclass(frozen=True)
class ProximalConfig:
    lambda_a: float = 0.4
    lambda_s: float = 0.3

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_s < 0:
            raise InvalidInputError("proximal weights must be non-negative")

    @property
    def denom(self) -> float:
        return 1.0 + self.lambda_a + self.lambda_s


@dataclass
class JacobianEstimate:
    matrix: np.ndarray
    h: float
    t: int


@dataclass
class Trajectory:
    errors: np.ndarray
    prompts: np.ndarray
    failure_index: int | None = None
    failure: str | None = None


def prompt_to_vector(prompt: Prompt, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    scale = np.array([w, h, w, h, w, h], dtype=np.float64)
    return prompt.as_array() / scale


def vector_to_prompt(vec, image_hw: tuple[int, int]) -> Prompt:
    h, w = image_hw
    v = np.asarray(vec, dtype=np.float64) * np.array([w, h, w, h, w, h])
    v = _order_box(v)
    return Prompt.from_array(v, image_diag(h, w))


def _order_box(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    if v.size == 6:
        v[[2, 4]] = np.sort(v[[2, 4]])
        v[[3, 5]] = np.sort(v[[3, 5]])
    return v


def proximal_update(p_hat, p_0, p_prev, cfg: ProximalConfig = ProximalConfig()) -> np.ndarray:
    """Closed-form minimizer of the anchor- and smoothness-regularized prompt objective."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    blended = (p_hat + cfg.lambda_a * np.asarray(p_0, dtype=np.float64)
               + cfg.lambda_s * np.asarray(p_prev, dtype=np.float64)) / cfg.denom
    return _order_box(blended)


def estimate_jacobian(loop: LoopMap, t: int, p, h: float = 1e-3) -> JacobianEstimate:
    """Central-difference Jacobian of ``loop(t, .)`` at ``p``."""
    if not h > 0:
        raise InvalidInputError("step h must be positive")
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    n = p.size
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        outs = []
        for sign in (+1, -1):
            try:
                outs.append(np.atleast_1d(np.asarray(loop(t, p + sign * step), dtype=np.float64)))
            except Exception as exc:
                raise JacobianEvaluationError(j, sign, exc) from exc
        with np.errstate(invalid="ignore", over="ignore"):
            cols.append((outs[0] - outs[1]) / (2.0 * h))
    matrix = np.column_stack(cols)
    if not np.all(np.isfinite(matrix)):
        raise NumericalFailure("non-finite Jacobian entries")
    return JacobianEstimate(matrix, h, t)


def spectral_radius(j) -> float:
    """Largest eigenvalue modulus, via LAPACK's QR iteration."""
    j = np.atleast_2d(np.asarray(j, dtype=np.float64))
    if j.shape[0] != j.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {j.shape}")
    if not np.all(np.isfinite(j)):
        raise NumericalFailure("matrix has non-finite entries")
    try:
        eig = np.linalg.eigvals(j)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue iteration did not converge: {exc}") from exc
    return float(np.max(np.abs(eig)))


def regularized_jacobian(j, cfg: ProximalConfig = ProximalConfig()) -> tuple[np.ndarray, float]:
    """Effective Jacobian of the proximally wrapped loop and its spectral radius bound."""
    j = np.atleast_2d(np.asarray(j, dtype=np.float64))
    j_reg = (j + cfg.lambda_s * np.eye(j.shape[0])) / cfg.denom
    bound = (spectral_radius(j) + cfg.lambda_s) / cfg.denom
    if spectral_radius(j_reg) > bound + EIG_TOL:
        raise NumericalFailure("regularized radius exceeds its bound")
    return j_reg, bound


def simulate_trajectory(
    loop: LoopMap,
    p_start,
    p_star_series: Sequence,
    T: int,
    stabilizer: ProximalConfig | None = None,
    anchor=None,
) -> Trajectory:
    """Iterate the loop ``T`` times and record ``e_t = ||p_t - p*_t||`` for t = 0..T.

    ``p_star_series`` holds one target per step; a single vector is reused
    for every step. With a stabilizer each raw update is blended with
    ``anchor`` (default: ``p_start``) and the previous prompt.
    """
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    p = np.atleast_1d(np.asarray(p_start, dtype=np.float64))
    stars = np.asarray(p_star_series, dtype=np.float64)
    if stars.ndim <= 1 and stars.size == p.size:
        stars = np.broadcast_to(stars.reshape(1, -1), (T + 1, p.size))
    stars = stars.reshape(len(stars), -1)
    if len(stars) < T + 1:
        raise InvalidInputError(f"need {T + 1} target prompts, got {len(stars)}")
    a = p.copy() if anchor is None else np.atleast_1d(np.asarray(anchor, dtype=np.float64))

    prompts = [p]
    errors = [float(np.linalg.norm(p - stars[0]))]
    for t in range(T):
        try:
            p_hat = np.atleast_1d(np.asarray(loop(t, p), dtype=np.float64))
        except Exception as exc:
            return Trajectory(np.array(errors), np.array(prompts), t, str(exc))
        if stabilizer is not None:
            p_hat = proximal_update(p_hat, a, p, stabilizer)
        p = p_hat
        prompts.append(p)
        errors.append(float(np.linalg.norm(p - stars[t + 1])))
    return Trajectory(np.array(errors), np.array(prompts))
