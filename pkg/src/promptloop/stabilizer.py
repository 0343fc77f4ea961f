"""Inference-time loop stabilization and the three pipeline runners.

The stabilized pipeline chains four components per decoder call:
attention-guided prompt extraction, the proximal anchor update, candidate
scoring, and soft persistence with anchor recovery.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from promptloop.dynamics import ProximalConfig, prompt_to_vector, proximal_update, vector_to_prompt
from promptloop.errors import EmptyMaskError, InvalidConfigError
from promptloop.grid import (
    EPS,
    Prompt,
    downsample_mask,
    mask_moments,
    pixel_to_token,
    upsample_attention,
    weighted_centroid,
)
from promptloop.metrics import (
    align_anchor,
    attention_entropy,
    dlr,
    js_divergence,
    mask_iou,
)
from promptloop.synth import (
    DecodeResult,
    World,
    _decode,
    gt_mask_at_grid,
    gt_prompt,
    object_stream,
    prompt_from_mask,
    shift_prompt,
)
from promptloop.trace_io import TraceRecord


class PipelineMethod(str, enum.Enum):
    ITERATIVE = "A"
    STABILIZED = "A-Stab"
    ORACLE = "B"


@dataclass(frozen=True)
class StabilizerConfig:
    lambda_a: float = 0.4
    lambda_s: float = 0.3
    tau: float = 0.15
    alpha: float = 0.35
    beta: float = 0.25
    gamma: float = 0.15
    delta: float = 0.15
    eta: float = 0.10
    tau_s: float = 0.30
    tau_d: float = 0.20
    tau_c: float = 0.70
    k_max: int = 3
    attention_guided: bool = True

    def __post_init__(self):
        numeric = [self.lambda_a, self.lambda_s, self.tau, self.alpha, self.beta, self.gamma,
                   self.delta, self.eta, self.tau_s, self.tau_d, self.tau_c, self.k_max]
        if any(v < 0 for v in numeric):
            raise InvalidConfigError("stabilizer parameters must be non-negative")

    @property
    def proximal(self) -> ProximalConfig:
        return ProximalConfig(self.lambda_a, self.lambda_s)


@dataclass
class ObjectState:
    anchor_prompt: Prompt
    anchor_attention: np.ndarray | None = None
    prev_prompt: Prompt | None = None
    prev_mask: np.ndarray | None = None
    prev_attention: np.ndarray | None = None
    lost_counter: int = 0
    alive: bool = True
    recover_next: bool = False


def attention_guided_extract(f, mask, tau: float = 0.15, eps: float = EPS,
                             image_diag: float | None = None) -> Prompt:
    """Prompt from the attention-weighted mask ``W = upsample(F) * M``.

    The box covers mask cells above 0.5 whose weight is above ``tau`` times
    the peak weight. With no attention mass on the mask this reduces to plain
    mask moments.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    diag = image_diag if image_diag is not None else math.hypot(h, w)
    weights = upsample_attention(f, h, w) * mask
    mass, cx, cy = weighted_centroid(weights)
    if mass <= eps:
        centroid, bbox = mask_moments(mask, eps)
        return Prompt(centroid, bbox, diag)
    keep = (mask > 0.5) & (weights > tau * weights.max())
    if not keep.any():
        keep = mask > 0.5
    if keep.any():
        rows = np.flatnonzero(keep.any(axis=1))
        cols = np.flatnonzero(keep.any(axis=0))
        bbox = (float(cols[0]), float(rows[0]), float(cols[-1]), float(rows[-1]))
    else:
        bbox = (cx, cy, cx, cy)
    return Prompt((cx, cy), bbox, diag)


@dataclass
class CandidateTerms:
    conf: np.ndarray
    cont: np.ndarray
    unc: np.ndarray
    div: np.ndarray
    leak: np.ndarray

    def scores(self, cfg: StabilizerConfig) -> np.ndarray:
        return (cfg.alpha * self.conf + cfg.beta * self.cont - cfg.gamma * self.unc
                - cfg.delta * self.div - cfg.eta * self.leak)


def candidate_terms(result: DecodeResult, state: ObjectState, image_diag: float,
                    eps: float = EPS) -> CandidateTerms:
    f = result.attention
    conf, cont, unc, div, leak = [], [], [], [], []
    anchor_c = np.asarray(state.anchor_prompt.centroid)
    for k, mask in enumerate(result.candidates):
        conf.append(result.confidences[k])
        cont.append(0.0 if state.prev_mask is None else mask_iou(mask, state.prev_mask))
        m_grid = downsample_mask(mask, *f.shape)
        inside = f * m_grid
        total = inside.sum()
        unc.append(attention_entropy(inside / total, eps)[1] if total > eps else 1.0)
        try:
            (cx, cy), _ = mask_moments(mask, eps)
            div.append(float(np.hypot(cx - anchor_c[0], cy - anchor_c[1])) / image_diag)
        except EmptyMaskError:
            div.append(1.0)
        ratio, _ = dlr(f, m_grid, eps=eps)
        leak.append(ratio / (1.0 + ratio))
    return CandidateTerms(*(np.array(v, dtype=np.float64) for v in (conf, cont, unc, div, leak)))


def score_candidates(result: DecodeResult, state: ObjectState, cfg: StabilizerConfig,
                     image_diag: float, eps: float = EPS) -> int:
    """Index maximizing the weighted score; ties go to the lowest index."""
    scores = candidate_terms(result, state, image_diag, eps).scores(cfg)
    return int(np.argmax(scores))


def soft_keep(state: ObjectState, aad: float, tcs: float, confidence: float,
              cfg: StabilizerConfig) -> tuple[bool, ObjectState]:
    """Disjunctive keep rule with a bounded budget of consecutive losses."""
    if not state.alive:
        return False, state
    keep = confidence > cfg.tau_s or aad < cfg.tau_d or tcs > cfg.tau_c
    if keep:
        state.lost_counter = 0
        state.recover_next = False
    else:
        state.lost_counter += 1
        state.recover_next = True
        if state.lost_counter >= cfg.k_max:
            state.alive = False
    return keep, state


def initial_prompt(world: World, object_id: int) -> Prompt:
    """Prompt from the automatic segmentation of slice 0, shifted by the object's init offset."""
    auto = _decode(world, object_id, 0, gt_prompt(world, 0, object_id))
    p = prompt_from_mask(world, auto.default_mask)
    dx, dy = world.config.objects[object_id].init_offset
    return shift_prompt(p, dx, dy)


def anchor_prompt(world: World, object_id: int, noise_px: float = 0.0) -> Prompt:
    """First-call prompt, optionally perturbed by isotropic noise of ``noise_px`` pixels."""
    p = initial_prompt(world, object_id)
    if noise_px > 0:
        dx, dy = noise_px * object_stream(world.config.seed, object_id, 1).standard_normal(2)
        p = shift_prompt(p, float(dx), float(dy))
    return p


def _record(world, method, object_id, t, prompt, result, mask, conf, status) -> TraceRecord:
    gt_full = world.gt_mask(object_id, t)
    return TraceRecord(
        method=method.value,
        slice=t,
        object=object_id,
        iteration=t,
        prompt=prompt,
        attention=result.attention,
        mask_pred=downsample_mask(mask, *world.config.grid),
        mask_gt=gt_mask_at_grid(world, object_id, t),
        confidence=float(conf),
        iou=mask_iou((mask > 0.5).astype(np.float64), gt_full),
        status=status,
    )


def _token_centroid(world: World, prompt: Prompt):
    return pixel_to_token(*prompt.centroid, world.config.image, world.config.grid)


def run_pipeline(world: World, object_id: int, method: PipelineMethod | str,
                 cfg: StabilizerConfig = StabilizerConfig(), iterations: int = 10,
                 anchor_noise: float = 0.0, eps: float = EPS,
                 anchor: Prompt | None = None) -> list[TraceRecord]:
    """Run one object through ``iterations`` feedback steps; iteration t uses slice t.

    The stabilized run anchors on the first-call prompt unless ``anchor`` is
    given; ``anchor_noise`` perturbs the anchor (pixels, isotropic).
    """
    method = PipelineMethod(method)
    T = min(iterations, world.config.slices)
    hw = world.config.image
    records: list[TraceRecord] = []

    if method is PipelineMethod.ORACLE:
        for t in range(T):
            p = gt_prompt(world, t, object_id)
            r = _decode(world, object_id, t, p)
            k = r.default_index
            records.append(_record(world, method, object_id, t, p, r, r.candidates[k],
                                   r.confidences[k], "ok"))
        return records

    p = initial_prompt(world, object_id)
    if method is PipelineMethod.ITERATIVE:
        for t in range(T):
            r = _decode(world, object_id, t, p)
            k = r.default_index
            mask = r.candidates[k]
            try:
                nxt = prompt_from_mask(world, mask)
                status = "ok"
            except EmptyMaskError:
                nxt, status = None, "dead"
            records.append(_record(world, method, object_id, t, p, r, mask, r.confidences[k], status))
            if nxt is None:
                break
            p = nxt
        return records

    if anchor is None:
        anchor = anchor_prompt(world, object_id, anchor_noise)
    state = ObjectState(anchor_prompt=anchor)
    anchor_vec = prompt_to_vector(state.anchor_prompt, hw)
    for t in range(T):
        r = _decode(world, object_id, t, p)
        f = r.attention
        if state.anchor_attention is None:
            state.anchor_attention = align_anchor(f, _token_centroid(world, state.anchor_prompt))
            aad_v, tcs_v = 0.0, 1.0
        else:
            aad_v = js_divergence(f, state.anchor_attention, eps)
            tcs_v = 1.0 - js_divergence(f, state.prev_attention, eps)
        k = score_candidates(r, state, cfg, world.diag, eps)
        mask = r.candidates[k]
        keep, state = soft_keep(state, aad_v, tcs_v, r.confidences[k], cfg)
        if not keep:
            status = "dead" if not state.alive else "lost"
            records.append(_record(world, method, object_id, t, p, r, mask, r.confidences[k], status))
            if not state.alive:
                break
            state.prev_attention = f
            p = state.anchor_prompt
            continue
        try:
            if cfg.attention_guided:
                p_hat = attention_guided_extract(f, mask, cfg.tau, eps, world.diag)
            else:
                p_hat = prompt_from_mask(world, mask)
        except EmptyMaskError:
            records.append(_record(world, method, object_id, t, p, r, mask, r.confidences[k], "dead"))
            break
        records.append(_record(world, method, object_id, t, p, r, mask, r.confidences[k], "ok"))
        blended = proximal_update(prompt_to_vector(p_hat, hw), anchor_vec,
                                  prompt_to_vector(p, hw), cfg.proximal)
        state.prev_prompt = p
        state.prev_mask = mask
        state.prev_attention = f
        p = vector_to_prompt(blended, hw)
    return records
