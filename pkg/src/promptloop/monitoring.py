"""Ground-truth-free drift alerts over a per-object stream of decoder calls.

Each rule reads only AAD, TCS, PDE and the change between consecutive
predicted masks, so it can run at inference time without annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from promptloop.errors import InvalidInputError


@dataclass(frozen=True)
class MonitorConfig:
    window: int = 3            # calls over which AAD must rise for a "steady" increase
    aad_rise: float = 0.02     # minimum per-call AAD increase within the window
    tcs_drop: float = 0.10     # TCS fall between consecutive calls counted as sharp
    pde_jump: float = 0.10     # PDE rise between consecutive calls counted as sharp
    tcs_high: float = 0.995    # TCS level treated as extremely high
    mask_static_iou: float = 0.995  # consecutive-mask IoU above this means no adaptation
    static_calls: int = 3      # how long the high-TCS, static-mask condition must last


@dataclass(frozen=True)
class Alert:
    index: int
    rule: str
    action: str


ACTIONS = {
    "aad_rising": "decoder drifting away from its anchor",
    "tcs_drop": "unstable attention jump after the last prompt update",
    "pde_jump": "prompt geometry moved too far from the object path",
    "aad_pde_rising": "strengthen anchor regularization or re-initialize",
    "over_regularized": "reduce smoothness or anchor weight",
}


def _rising(values: np.ndarray, i: int, window: int, step: float) -> bool:
    if i < window:
        return False
    seg = values[i - window:i + 1]
    return bool(np.all(np.diff(seg) >= step))


def check_stream(aad: Sequence[float], tcs: Sequence[float], pde: Sequence[float],
                 mask_iou_prev: Sequence[float] | None = None,
                 cfg: MonitorConfig = MonitorConfig()) -> list[Alert]:
    """Evaluate every rule at every call; ``mask_iou_prev[i]`` compares mask i with mask i-1."""
    a = np.asarray(aad, dtype=np.float64)
    s = np.asarray(tcs, dtype=np.float64)
    p = np.asarray(pde, dtype=np.float64)
    if not (a.shape == s.shape == p.shape) or a.ndim != 1:
        raise InvalidInputError("aad, tcs and pde must be 1-D and equally long")
    m = None if mask_iou_prev is None else np.asarray(mask_iou_prev, dtype=np.float64)
    if m is not None and m.shape != a.shape:
        raise InvalidInputError("mask_iou_prev must match the metric streams")

    alerts: list[Alert] = []

    def emit(i, rule):
        alerts.append(Alert(i, rule, ACTIONS[rule]))

    static_run = 0
    for i in range(a.size):
        aad_up = _rising(a, i, cfg.window, cfg.aad_rise)
        pde_up = _rising(p, i, cfg.window, cfg.aad_rise)
        if aad_up:
            emit(i, "aad_rising")
        if i > 0 and s[i - 1] - s[i] >= cfg.tcs_drop:
            emit(i, "tcs_drop")
        if i > 0 and p[i] - p[i - 1] >= cfg.pde_jump:
            emit(i, "pde_jump")
        if aad_up and pde_up:
            emit(i, "aad_pde_rising")
        if m is not None and i > 0 and s[i] >= cfg.tcs_high and m[i] >= cfg.mask_static_iou:
            static_run += 1
        else:
            static_run = 0
        if static_run >= cfg.static_calls:
            emit(i, "over_regularized")
    return alerts
