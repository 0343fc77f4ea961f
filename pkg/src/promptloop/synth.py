"""Synthetic world and decoder that close the prompt-feedback loop at desk scale.

Decoder model, for object ``o`` on slice ``t`` given a prompt centroid ``c``
(pixels, clamped to the image):

* GT centre path: ``c*_t = center + amplitude * sin(2*pi*t / period)``
  (static when ``period`` is 0).
* Attention centre::

      c_att = c*_t + gain * (c - c*_t)
              + sum_d [P_d(c) - P_d(c*_t)]
              + sigma * (1 + noise_gain * |c - c*_t| / confidence_scale) * n_t

  with ``P_d(c) = pull_d * (c_d - c) * exp(-|c_d - c|^2 / (2 * pull_range^2))``
  and ``n_t ~ N(0, I_2)`` drawn from stream ``(seed, o, t)``. The pull is
  measured relative to its value at the true centre, so a correct prompt is
  a fixed point up to noise; off-target prompts get proportionally noisier
  attention.

* Feature grid ``Z`` (tokens): ``max`` of the object's soft ellipse at
  ``c*_t`` and each distractor's soft ellipse scaled by its ``likelihood``.
* Attention: ``normalize(K * (background + Z))`` with ``K`` a Gaussian of
  width ``attention_width`` tokens centred on ``c_att``. With
  ``uniform_attention`` the attention is exactly uniform and ``K`` is flat,
  so the evidence ratio below is 1.
* Evidence ``E = sum(K * Z) / sum(K)``; ``E_ref`` is the same quantity with
  the kernel on ``c*_t``. Mask radius factor
  ``s = max(min_scale, 1 - feature_coupling * (1 - clip(E / E_ref, 0, 1)))``.
* Candidate ``k``: soft ellipse centred on ``c_att`` with radii
  ``radii * candidate_scales[k] * s`` and logistic edge ``mask_edge`` px.
  Its discrete centroid is ``c_att`` to ~1e-7 px, so with no distractors and
  ``sigma = 0`` the centroid loop is affine with gain exactly ``gain``.
* Confidence ``k``: ``confidence_base[k] * exp(-|c - c*_t|^2 / (2 * confidence_scale^2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from promptloop import kernels
from promptloop.errors import InvalidConfigError, InvalidInputError, ObjectAbsentError
from promptloop.grid import (
    EPS,
    Prompt,
    box_from_mask,
    downsample_mask,
    image_diag,
    mask_moments,
    normalize_attention,
    pixel_to_token,
)


@dataclass(frozen=True)
class ObjectSpec:
    center: tuple[float, float]
    radii: tuple[float, float]
    drift_amplitude: tuple[float, float] = (0.0, 0.0)
    drift_period: float = 0.0
    init_offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class DistractorSpec:
    center: tuple[float, float]
    radii: tuple[float, float]
    pull: float
    likelihood: float = 0.8
    object_id: int | None = None  # None: acts on every object


@dataclass(frozen=True)
class WorldConfig:
    objects: tuple[ObjectSpec, ...]
    distractors: tuple[DistractorSpec, ...] = ()
    slices: int = 10
    grid: tuple[int, int] = (64, 64)
    image: tuple[int, int] = (256, 256)
    gain: float = 1.0
    sigma: float = 0.0
    candidates: int = 3
    seed: int = 0
    attention_width: float = 2.0
    uniform_attention: bool = False
    background: float = 0.05
    feature_coupling: float = 1.0
    min_scale: float = 0.15
    mask_edge: float = 1.0
    pull_range: float = 16.0
    noise_gain: float = 1.0
    confidence_scale: float = 12.0
    candidate_scales: tuple[float, ...] = (1.0, 0.7, 1.4)
    confidence_base: tuple[float, ...] = (0.9, 0.8, 0.7)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "image", tuple(self.image))
        object.__setattr__(self, "candidate_scales", tuple(self.candidate_scales))
        object.__setattr__(self, "confidence_base", tuple(self.confidence_base))


@dataclass
class DecodeResult:
    attention: np.ndarray
    candidates: list[np.ndarray]
    confidences: list[float]
    feature_grid: np.ndarray
    default_index: int
    attention_center: tuple[float, float]
    clamped: bool = False

    @property
    def default_mask(self) -> np.ndarray:
        return self.candidates[self.default_index]


def object_stream(seed: int, object_id: int, *counter: int) -> np.random.Generator:
    """Counter-based stream: the draw depends only on ``(seed, object_id, counter)``."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(object_id), *map(int, counter)])


@dataclass
class World:
    config: WorldConfig
    _ref_cache: dict = field(default_factory=dict, repr=False)

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.config.image

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.config.grid

    @property
    def diag(self) -> float:
        return image_diag(*self.config.image)

    @property
    def n_objects(self) -> int:
        return len(self.config.objects)

    def center(self, object_id: int, t: int) -> tuple[float, float]:
        obj = self.config.objects[object_id]
        if obj.drift_period > 0:
            phase = math.sin(2.0 * math.pi * t / obj.drift_period)
        else:
            phase = 0.0
        return (obj.center[0] + obj.drift_amplitude[0] * phase,
                obj.center[1] + obj.drift_amplitude[1] * phase)

    def distractors_for(self, object_id: int) -> list[DistractorSpec]:
        return [d for d in self.config.distractors if d.object_id in (None, object_id)]

    def noise(self, object_id: int, t: int) -> np.ndarray:
        return object_stream(self.config.seed, object_id, 0, t).standard_normal(2)

    def gt_mask(self, object_id: int, t: int) -> np.ndarray:
        """Binary ellipse sampled at pixel centres."""
        cx, cy = self.center(object_id, t)
        rx, ry = self.config.objects[object_id].radii
        h, w = self.config.image
        ys = ((np.arange(h) - cy) / ry) ** 2
        xs = ((np.arange(w) - cx) / rx) ** 2
        return (ys[:, None] + xs[None, :] <= 1.0).astype(np.float64)

    def _token_ellipse(self, center, radii) -> np.ndarray:
        gh, gw = self.config.grid
        h, w = self.config.image
        u, v = pixel_to_token(center[0], center[1], (h, w), (gh, gw))
        rx = radii[0] * gw / w
        ry = radii[1] * gh / h
        return kernels.soft_ellipse(gh, gw, u, v, rx, ry, 0.5)

    def feature_grid(self, object_id: int, t: int) -> np.ndarray:
        z = self._token_ellipse(self.center(object_id, t), self.config.objects[object_id].radii)
        for d in self.distractors_for(object_id):
            z = np.maximum(z, d.likelihood * self._token_ellipse(d.center, d.radii))
        return z

    def _kernel(self, center_px) -> np.ndarray:
        gh, gw = self.config.grid
        if self.config.uniform_attention:
            return np.ones((gh, gw))
        u, v = pixel_to_token(center_px[0], center_px[1], self.config.image, (gh, gw))
        ys = (np.arange(gh) - v) ** 2
        xs = (np.arange(gw) - u) ** 2
        return np.exp(-(ys[:, None] + xs[None, :]) / (2.0 * self.config.attention_width ** 2))

    def reference_evidence(self, object_id: int, t: int) -> float:
        key = (object_id, t)
        if key not in self._ref_cache:
            k = self._kernel(self.center(object_id, t))
            z = self.feature_grid(object_id, t)
            self._ref_cache[key] = float((k * z).sum() / k.sum())
        return self._ref_cache[key]


def build_world(cfg: WorldConfig) -> World:
    if cfg.slices < 1:
        raise InvalidConfigError("slices must be >= 1")
    if cfg.gain < 0 or cfg.sigma < 0:
        raise InvalidConfigError("gain and sigma must be non-negative")
    if cfg.candidates < 1:
        raise InvalidConfigError("candidates must be >= 1")
    if not cfg.objects:
        raise InvalidConfigError("world needs at least one object")
    if len(cfg.candidate_scales) < cfg.candidates or len(cfg.confidence_base) < cfg.candidates:
        raise InvalidConfigError("candidate_scales/confidence_base shorter than candidate count")
    for i, obj in enumerate(cfg.objects):
        if min(obj.radii) <= 0:
            raise InvalidConfigError(f"object {i} has non-positive radii {obj.radii}")
    for i, d in enumerate(cfg.distractors):
        if min(d.radii) <= 0:
            raise InvalidConfigError(f"distractor {i} has non-positive radii {d.radii}")
    if min(cfg.grid) < 1 or cfg.image[0] < cfg.grid[0] or cfg.image[1] < cfg.grid[1]:
        raise InvalidConfigError("image must be at least as large as the attention grid")
    return World(cfg)


def _clamp_prompt(world: World, prompt: Prompt) -> tuple[tuple[float, float], bool]:
    h, w = world.config.image
    x = min(max(prompt.centroid[0], 0.0), w - 1.0)
    y = min(max(prompt.centroid[1], 0.0), h - 1.0)
    return (x, y), (x, y) != tuple(prompt.centroid)


def _pull(d: DistractorSpec, c: np.ndarray, pull_range: float) -> np.ndarray:
    delta = np.asarray(d.center, dtype=np.float64) - c
    return d.pull * delta * math.exp(-float(delta @ delta) / (2.0 * pull_range ** 2))


def attention_center(world: World, object_id: int, t: int, centroid) -> np.ndarray:
    cfg = world.config
    c_star = np.array(world.center(object_id, t))
    c = np.asarray(centroid, dtype=np.float64)
    out = c_star + cfg.gain * (c - c_star)
    for d in world.distractors_for(object_id):
        out = out + _pull(d, c, cfg.pull_range) - _pull(d, c_star, cfg.pull_range)
    if cfg.sigma > 0:
        off = math.hypot(c[0] - c_star[0], c[1] - c_star[1]) / cfg.confidence_scale
        out = out + cfg.sigma * (1.0 + cfg.noise_gain * off) * world.noise(object_id, t)
    return out


def _decode(world: World, object_id: int, t: int, prompt: Prompt, ablated=None) -> DecodeResult:
    cfg = world.config
    if not 0 <= t < cfg.slices:
        raise InvalidInputError(f"slice {t} outside [0, {cfg.slices})")
    centroid, clamped = _clamp_prompt(world, prompt)
    c_att = attention_center(world, object_id, t, centroid)
    z = world.feature_grid(object_id, t)
    if ablated is not None and len(ablated) > 0:
        z = z.copy()
        flat = z.ravel()
        idx = np.asarray(ablated, dtype=np.intp)
        if idx.min() < 0 or idx.max() >= flat.size:
            raise InvalidInputError("ablated token index outside the grid")
        flat[idx] = flat.mean()
    k = world._kernel(c_att)
    if cfg.uniform_attention:
        attention = np.full(z.shape, 1.0 / z.size)
    else:
        attention = normalize_attention(k * (cfg.background + z))

    evidence = float((k * z).sum() / k.sum())
    ref = world.reference_evidence(object_id, t)
    ratio = min(1.0, max(0.0, evidence / ref)) if ref > 0 else 1.0
    scale = max(cfg.min_scale, 1.0 - cfg.feature_coupling * (1.0 - ratio))

    h, w = cfg.image
    rx, ry = cfg.objects[object_id].radii
    c_star = world.center(object_id, t)
    dist2 = (centroid[0] - c_star[0]) ** 2 + (centroid[1] - c_star[1]) ** 2
    decay = math.exp(-dist2 / (2.0 * cfg.confidence_scale ** 2))
    candidates, confidences = [], []
    for i in range(cfg.candidates):
        s = cfg.candidate_scales[i] * scale
        candidates.append(kernels.soft_ellipse(h, w, c_att[0], c_att[1], rx * s, ry * s, cfg.mask_edge))
        confidences.append(cfg.confidence_base[i] * decay)
    default = int(np.argmax(confidences))
    return DecodeResult(attention, candidates, confidences, z, default,
                        (float(c_att[0]), float(c_att[1])), clamped)


def decode(world: World, t: int, prompt: Prompt, object_id: int = 0) -> DecodeResult:
    return _decode(world, object_id, t, prompt)


def ablated_decode(world: World, t: int, prompt: Prompt, ablated: Sequence[int],
                   object_id: int = 0) -> np.ndarray:
    """Default-choice mask after replacing ablated feature tokens by the token mean."""
    return _decode(world, object_id, t, prompt, ablated=ablated).default_mask


def gt_prompt(world: World, t: int, object_id: int = 0) -> Prompt:
    mask = world.gt_mask(object_id, t)
    if mask.sum() == 0:
        raise ObjectAbsentError(f"object {object_id} has no pixels on slice {t}")
    (cx, cy), _ = mask_moments(mask)
    return Prompt((cx, cy), box_from_mask(mask), world.diag)


def prompt_from_mask(world: World, mask) -> Prompt:
    centroid, bbox = mask_moments(mask)
    return Prompt(centroid, bbox, world.diag)


def shift_prompt(prompt: Prompt, dx: float, dy: float) -> Prompt:
    x1, y1, x2, y2 = prompt.bbox
    return Prompt((prompt.centroid[0] + dx, prompt.centroid[1] + dy),
                  (x1 + dx, y1 + dy, x2 + dx, y2 + dy), prompt.image_diag)


class WorldOracle:
    """Decoder oracle bound to one object and slice, for counterfactual ablation."""

    def __init__(self, world: World, object_id: int, t: int):
        self.world = world
        self.object_id = object_id
        self.t = t

    def decode(self, prompt: Prompt):
        r = _decode(self.world, self.object_id, self.t, prompt)
        return r.attention, r.default_mask, r.confidences

    def ablated_decode(self, prompt: Prompt, ablated):
        return ablated_decode(self.world, self.t, prompt, ablated, self.object_id)


def linear_loop(a, b=None):
    """Loop map ``p -> A p + b``, identical at every step."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.zeros(a.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("A and b must be finite")

    def loop(t, p):
        return a @ np.atleast_1d(p) + b

    return loop


def gt_mask_at_grid(world: World, object_id: int, t: int) -> np.ndarray:
    return downsample_mask(world.gt_mask(object_id, t), *world.config.grid)


def default_world_config(
    n_objects: int = 200,
    seed: int = 0,
    slices: int = 10,
    gain: float = 1.15,
    sigma: float = 0.5,
    pull: float = 0.3,
    image: tuple[int, int] = (256, 256),
    grid: tuple[int, int] = (64, 64),
    drift: float = 2.0,
    init_offset: tuple[float, float] = (2.0, 5.0),
    noise_gain: float = 3.0,
) -> WorldConfig:
    """Drifting objects, each with one nearby distractor pulling on its prompt.

    Each object's first prompt is off by a random ``init_offset`` pixels.
    """
    rng = np.random.default_rng([seed, 7919])
    h, w = image
    objects, distractors = [], []
    margin = 56.0
    for i in range(n_objects):
        cx, cy = rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)
        r = rng.uniform(8.0, 13.0)
        radii = (r * rng.uniform(0.8, 1.2), r * rng.uniform(0.8, 1.2))
        angle = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.0, drift)
        k_angle = rng.uniform(0, 2 * math.pi)
        kick = rng.uniform(*init_offset)
        objects.append(ObjectSpec(
            center=(cx, cy), radii=radii,
            drift_amplitude=(amp * math.cos(angle), amp * math.sin(angle)),
            drift_period=float(rng.uniform(16.0, 30.0)),
            init_offset=(kick * math.cos(k_angle), kick * math.sin(k_angle)),
        ))
        d_angle = rng.uniform(0, 2 * math.pi)
        d_dist = rng.uniform(20.0, 30.0)
        dr = rng.uniform(6.0, 10.0)
        distractors.append(DistractorSpec(
            center=(cx + d_dist * math.cos(d_angle), cy + d_dist * math.sin(d_angle)),
            radii=(dr, dr), pull=pull, likelihood=0.8, object_id=i,
        ))
    return WorldConfig(objects=tuple(objects), distractors=tuple(distractors), slices=slices,
                       grid=grid, image=image, gain=gain, sigma=sigma, seed=seed,
                       noise_gain=noise_gain)


def with_updates(cfg: WorldConfig, **changes) -> WorldConfig:
    return replace(cfg, **changes)
