"""Per-call decoder-coupling metrics and the panel that bundles them.

All attention inputs are normalized distributions (see
:func:`promptloop.grid.normalize_attention`). ``G`` is a soft mask at the
attention resolution: the ground-truth mask when available, otherwise the
predicted mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from promptloop.errors import AnchorMissingError, InvalidInputError, OracleError
from promptloop.grid import (
    EPS,
    Prompt,
    circular_shift,
    downsample_mask,
    js_divergence,
    pixel_to_token,
    weighted_centroid,
)

TAU_CLAMP = 1e4
CCD_K_FRAC = 0.05


@dataclass(frozen=True)
class DlrPolicy:
    tau_clamp: float = TAU_CLAMP

    def __post_init__(self):
        if not self.tau_clamp > 0:
            raise InvalidInputError("tau_clamp must be positive")


@dataclass(frozen=True)
class MetricConfig:
    eps: float = EPS
    tau_clamp: float = TAU_CLAMP
    lambda_b: float = 1.0
    k_frac: float = CCD_K_FRAC
    downsample: str = "area"  # or "nearest", for full-resolution masks


@dataclass
class MetricPanel:
    """The per-call metric bundle. ``None`` marks a missing value."""

    cama_dice: float
    cama_iou: float
    aad: float
    tcs: float
    pde: float
    dlr_clamped: float
    log_dlr: float
    pics: float
    attention_entropy_raw: float
    attention_entropy_normalized: float
    ccd: float | None = None
    sca: float | None = None
    gt_based: bool = False

    FIELDS = (
        "cama_dice", "cama_iou", "aad", "tcs", "pde", "dlr_clamped", "log_dlr",
        "ccd", "pics", "attention_entropy_raw", "attention_entropy_normalized", "sca",
    )

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = MetricPanel.FIELDS


class DecoderOracle(Protocol):
    """Re-decodable view of one decoder call, used for counterfactual ablation."""

    def decode(self, prompt: Prompt) -> tuple[np.ndarray, np.ndarray, Sequence[float]]:
        ...

    def ablated_decode(self, prompt: Prompt, ablated: Sequence[int]) -> np.ndarray:
        ...


def _pair(f, g):
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise InvalidInputError(f"dimension mismatch: {f.shape} vs {g.shape}")
    return f, g


def cama(f, g, eps: float = EPS) -> tuple[float, float]:
    f, g = _pair(f, g)
    sf, sg, sfg = float(f.sum()), float(g.sum()), float((f * g).sum())
    dice = 2.0 * sfg / (sf + sg + eps)
    iou = sfg / (sf + sg - sfg + eps)
    return min(1.0, max(0.0, dice)), min(1.0, max(0.0, iou))


def align_anchor(f0, prompt_centroid_token: tuple[float, float]) -> np.ndarray:
    """Circularly shift ``f0`` so its mass centroid sits on the prompt centroid.

    The shift is the rounded displacement, in whole tokens.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    _, mx, my = weighted_centroid(f0)
    dx = int(round(prompt_centroid_token[0] - mx))
    dy = int(round(prompt_centroid_token[1] - my))
    return circular_shift(f0, dx, dy)


def aad(f_t, f0_aligned, eps: float = EPS) -> float:
    if f0_aligned is None:
        raise AnchorMissingError("no anchor attention; treat this call as iteration 0")
    f_t, f0_aligned = _pair(f_t, f0_aligned)
    return js_divergence(f_t, f0_aligned, eps)


def tcs(f_t, f_prev, eps: float = EPS) -> float:
    if f_prev is None:
        return 1.0
    f_t, f_prev = _pair(f_t, f_prev)
    return 1.0 - js_divergence(f_t, f_prev, eps)


def box_iou(a, b, eps: float = EPS) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    # eps on both sides: identical (even zero-area) boxes score exactly 1
    return (inter + eps) / (area_a + area_b - inter + eps)


def pde(p_t: Prompt, p_0: Prompt, lambda_b: float = 1.0, eps: float = EPS) -> float:
    dx = p_t.centroid[0] - p_0.centroid[0]
    dy = p_t.centroid[1] - p_0.centroid[1]
    drift = (dx * dx + dy * dy) / (p_0.image_diag ** 2)
    return max(0.0, drift + lambda_b * (1.0 - box_iou(p_t.bbox, p_0.bbox, eps)))


def dlr(f, g, policy: DlrPolicy = DlrPolicy(), eps: float = EPS) -> tuple[float, float]:
    """Return ``(clamped ratio, log of the unclamped ratio)``."""
    f, g = _pair(f, g)
    outside = float((f * (1.0 - g)).sum())
    inside = float((f * g).sum())
    ratio = max(0.0, outside) / (inside + eps)
    return min(ratio, policy.tau_clamp), math.log(ratio + eps)


def mask_iou(a, b, eps: float = EPS) -> float:
    """Soft (min/max) IoU; equals the usual IoU on binary masks."""
    a, b = _pair(a, b)
    inter = float(np.minimum(a, b).sum())
    union = float(np.maximum(a, b).sum())
    if union <= eps:
        return 1.0
    return inter / union


def top_tokens(f, k_frac: float) -> np.ndarray:
    """Flat indices of the ``ceil(k_frac * n)`` most-attended tokens; ties by row-major index."""
    if not 0.0 < k_frac < 1.0:
        raise InvalidInputError("k_frac must lie in (0, 1)")
    flat = np.asarray(f, dtype=np.float64).ravel()
    k = math.ceil(k_frac * flat.size)
    order = np.lexsort((np.arange(flat.size), -flat))
    return np.sort(order[:k])


def _fit(mask, like: np.ndarray, mode: str = "area") -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape == like.shape:
        return mask
    return downsample_mask(mask, *like.shape, mode=mode)


def ccd(oracle: DecoderOracle, prompt: Prompt, f_final, g, k_frac: float = CCD_K_FRAC,
        downsample: str = "area") -> float:
    g = np.asarray(g, dtype=np.float64)
    ablated = top_tokens(f_final, k_frac)
    try:
        _, base, _ = oracle.decode(prompt)
        ablated_mask = oracle.ablated_decode(prompt, ablated)
    except OracleError:
        raise
    except Exception as exc:
        raise OracleError(f"decoder oracle failed: {exc}") from exc
    drop = (mask_iou(_fit(base, g, downsample), g)
            - mask_iou(_fit(ablated_mask, g, downsample), g))
    return max(0.0, drop)


def pics(cama_dice: float, tcs_value: float, aad_value: float, dlr_clamped: float,
         policy: DlrPolicy = DlrPolicy()) -> float:
    value = cama_dice * tcs_value * (1.0 - aad_value) * (1.0 - dlr_clamped / policy.tau_clamp)
    return min(1.0, max(0.0, value))


def attention_entropy(f, eps: float = EPS) -> tuple[float, float]:
    """Entropy in nats and its value normalized by ``ln(H*W)``."""
    f = np.asarray(f, dtype=np.float64)
    # the eps inside the log can push a point mass a hair below zero
    raw = max(0.0, float(-(f * np.log(f + eps)).sum()))
    n = f.size
    if n <= 1:
        return raw, 0.0
    return raw, raw / math.log(n)


def average_ranks(values) -> np.ndarray:
    return rankdata(np.asarray(values, dtype=np.float64), method="average")


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError("length mismatch")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return None
    return max(-1.0, min(1.0, float(xc @ yc) / denom))


def spearman(x, y) -> float | None:
    if len(x) != len(y):
        raise InvalidInputError("length mismatch")
    return pearson(average_ranks(x), average_ranks(y))


def sca(self_vec, cross_vec) -> float | None:
    """Spearman correlation of self- and cross-attention summaries; None if either is constant."""
    if len(self_vec) != len(cross_vec):
        raise InvalidInputError("length mismatch")
    if len(self_vec) < 2:
        raise InvalidInputError("need at least two entries")
    return spearman(self_vec, cross_vec)


@dataclass
class Anchor:
    """First-call reference for one object: prompt and centroid-aligned attention."""

    prompt: Prompt
    attention_aligned: np.ndarray
    image_hw: tuple[int, int]
    attention_raw: np.ndarray | None = None

    @classmethod
    def from_call(cls, prompt: Prompt, attention, image_hw: tuple[int, int]) -> "Anchor":
        attention = np.asarray(attention, dtype=np.float64)
        c_tok = pixel_to_token(*prompt.centroid, image_hw, attention.shape)
        return cls(prompt, align_anchor(attention, c_tok), tuple(image_hw), attention)

    def is_same_call(self, prompt: Prompt, attention) -> bool:
        """True when ``(prompt, attention)`` is the anchor call itself."""
        return (self.attention_raw is not None and prompt == self.prompt
                and np.array_equal(np.asarray(attention), self.attention_raw))


def metric_panel(
    attention,
    prompt: Prompt,
    mask_pred,
    anchor: Anchor,
    prev_attention=None,
    gt=None,
    oracle: DecoderOracle | None = None,
    sca_vectors: tuple[Sequence[float], Sequence[float]] | None = None,
    is_anchor_call: bool = False,
    config: MetricConfig = MetricConfig(),
) -> MetricPanel:
    """Compute every metric for one decoder call.

    ``is_anchor_call`` marks iteration 0, where AAD, TCS and PDE are
    references to themselves (0, 1, 0). A call whose prompt and attention
    equal the anchor's is treated the same way. CCD and SCA stay ``None`` unless an
    oracle or the self/cross summaries are supplied.
    """
    eps = config.eps
    policy = DlrPolicy(config.tau_clamp)
    f = np.asarray(attention, dtype=np.float64)
    gt_based = gt is not None
    g = np.asarray(gt if gt_based else mask_pred, dtype=np.float64)
    if g.shape != f.shape:
        g = downsample_mask(g, *f.shape, mode=config.downsample)

    dice, iou = cama(f, g, eps)
    if is_anchor_call:
        aad_v, tcs_v, pde_v = 0.0, 1.0, 0.0
    else:
        aad_v = 0.0 if anchor.is_same_call(prompt, f) else aad(f, anchor.attention_aligned, eps)
        tcs_v = tcs(f, prev_attention, eps)
        pde_v = pde(prompt, anchor.prompt, config.lambda_b, eps)
    dlr_c, log_d = dlr(f, g, policy, eps)
    ae_raw, ae_norm = attention_entropy(f, eps)

    ccd_v = None
    if oracle is not None:
        try:
            ccd_v = ccd(oracle, prompt, f, g, config.k_frac, config.downsample)
        except OracleError:
            ccd_v = None
    sca_v = sca(*sca_vectors) if sca_vectors is not None else None

    return MetricPanel(
        cama_dice=dice,
        cama_iou=iou,
        aad=aad_v,
        tcs=tcs_v,
        pde=pde_v,
        dlr_clamped=dlr_c,
        log_dlr=log_d,
        pics=pics(dice, tcs_v, aad_v, dlr_c, policy),
        attention_entropy_raw=ae_raw,
        attention_entropy_normalized=ae_norm,
        ccd=ccd_v,
        sca=sca_v,
        gt_based=gt_based,
    )


def panels_for_records(records, image_hw: tuple[int, int], oracle_factory=None,
                       config: MetricConfig = MetricConfig(), use_gt: bool = True) -> list[MetricPanel]:
    """Panels for a trace, in record order.

    The anchor for each ``(method, object)`` is its lowest-iteration record.
    ``oracle_factory(record)`` supplies a decoder oracle for CCD, or None.
    """
    groups: dict[tuple[str, int], list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((r.method, r.object), []).append(i)
    panels: list[MetricPanel | None] = [None] * len(records)
    for idx in groups.values():
        idx.sort(key=lambda i: records[i].iteration)
        first = records[idx[0]]
        anchor = Anchor.from_call(first.prompt, first.attention, image_hw)
        prev = None
        for n, i in enumerate(idx):
            r = records[i]
            oracle = oracle_factory(r) if oracle_factory is not None else None
            panels[i] = metric_panel(
                r.attention, r.prompt, r.mask_pred, anchor,
                prev_attention=prev,
                gt=r.mask_gt if use_gt else None,
                oracle=oracle,
                is_anchor_call=(n == 0),
                config=config,
            )
            prev = r.attention
    return panels
