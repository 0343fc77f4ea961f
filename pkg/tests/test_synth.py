from __future__ import annotations

import math

import numpy as np
import pytest

from promptloop.errors import InvalidConfigError, InvalidInputError, ObjectAbsentError
from promptloop.grid import Prompt, weighted_centroid
from promptloop.metrics import ccd, mask_iou
from promptloop.synth import (
    DistractorSpec,
    ObjectSpec,
    WorldConfig,
    WorldOracle,
    ablated_decode,
    attention_center,
    build_world,
    decode,
    default_world_config,
    gt_prompt,
    linear_loop,
    object_stream,
    shift_prompt,
    with_updates,
)

CENTER = (128.0, 120.0)


def single_world(**kw) -> "World":
    obj = kw.pop("obj", ObjectSpec(center=CENTER, radii=(12.0, 10.0)))
    return build_world(WorldConfig(objects=(obj,), **kw))


def point_prompt(world, x, y) -> Prompt:
    return Prompt((x, y), (x - 5, y - 5, x + 5, y + 5), world.diag)


def decoded_centroid(world, t, prompt, object_id=0):
    _, cx, cy = weighted_centroid(decode(world, t, prompt, object_id).default_mask)
    return np.array([cx, cy])


class TestWorldGeometry:
    def test_drift_path_formula(self):
        obj = ObjectSpec(center=(100.0, 90.0), radii=(8, 8), drift_amplitude=(3.0, -2.0),
                         drift_period=20.0)
        w = single_world(obj=obj, slices=12)
        for t in range(12):
            s = math.sin(2 * math.pi * t / 20.0)
            assert w.center(0, t) == pytest.approx((100 + 3 * s, 90 - 2 * s), abs=1e-12)

    def test_zero_period_is_static(self):
        obj = ObjectSpec(center=(100.0, 90.0), radii=(8, 8), drift_amplitude=(3.0, 3.0))
        w = single_world(obj=obj)
        assert all(w.center(0, t) == (100.0, 90.0) for t in range(10))

    def test_gt_prompt_centroid_on_integer_center(self):
        w = single_world()
        p = gt_prompt(w, 0)
        assert p.centroid == pytest.approx(CENTER, abs=1e-9)
        x1, y1, x2, y2 = p.bbox
        assert (x1 + x2) / 2 == pytest.approx(CENTER[0]) and (y1 + y2) / 2 == pytest.approx(CENTER[1])

    def test_gt_prompt_absent_object(self):
        w = single_world(obj=ObjectSpec(center=(-100.0, -100.0), radii=(5, 5)))
        with pytest.raises(ObjectAbsentError):
            gt_prompt(w, 0)

    def test_feature_grid_peaks_at_object(self):
        w = single_world()
        z = w.feature_grid(0, 0)
        r, c = np.unravel_index(np.argmax(z), z.shape)
        assert abs(c - (CENTER[0] - 1.5) / 4) <= 1 and abs(r - (CENTER[1] - 1.5) / 4) <= 1


class TestDecoder:
    def test_deterministic(self):
        w1 = build_world(default_world_config(n_objects=3, seed=5))
        w2 = build_world(default_world_config(n_objects=3, seed=5))
        p = gt_prompt(w1, 2, 1)
        a, b = decode(w1, 2, p, 1), decode(w2, 2, p, 1)
        assert np.array_equal(a.attention, b.attention)
        assert all(np.array_equal(x, y) for x, y in zip(a.candidates, b.candidates))

    def test_noise_is_counter_based(self):
        w = build_world(default_world_config(n_objects=3, seed=5))
        late = w.noise(2, 7)
        for t in range(7):
            w.noise(0, t)
        assert np.array_equal(late, w.noise(2, 7))
        assert np.array_equal(object_stream(5, 2, 0, 7).standard_normal(2), late)

    def test_attention_is_distribution(self):
        w = build_world(default_world_config(n_objects=2, seed=1))
        f = decode(w, 0, gt_prompt(w, 0)).attention
        assert f.shape == (64, 64) and np.all(f >= 0) and f.sum() == pytest.approx(1.0, abs=1e-12)

    def test_uniform_attention_exact(self):
        w = single_world(uniform_attention=True)
        f = decode(w, 0, gt_prompt(w, 0)).attention
        assert np.all(f == 1.0 / f.size)

    @pytest.mark.parametrize("dx,dy", [(3.0, 0.0), (-2.0, 4.0), (5.5, -1.5)])
    def test_gain_zero_snaps_to_truth(self, dx, dy):
        w = single_world(gain=0.0)
        c = decoded_centroid(w, 0, point_prompt(w, CENTER[0] + dx, CENTER[1] + dy))
        assert c == pytest.approx(CENTER, abs=1e-6)

    @pytest.mark.parametrize("dx,dy", [(3.0, 0.0), (-2.0, 4.0), (5.5, -1.5)])
    def test_gain_fidelity(self, dx, dy):
        w = single_world(gain=1.2)
        c = decoded_centroid(w, 0, point_prompt(w, CENTER[0] + dx, CENTER[1] + dy))
        assert c - np.array(CENTER) == pytest.approx([1.2 * dx, 1.2 * dy], abs=1e-4)

    def test_truth_is_fixed_point_with_distractor(self):
        d = DistractorSpec(center=(150.0, 120.0), radii=(8, 8), pull=0.5)
        w = single_world(distractors=(d,), gain=1.2)
        assert attention_center(w, 0, 0, CENTER) == pytest.approx(CENTER, abs=1e-12)
        off = attention_center(w, 0, 0, (CENTER[0] + 4, CENTER[1]))
        plain = attention_center(single_world(gain=1.2), 0, 0, (CENTER[0] + 4, CENTER[1]))
        assert off[0] > plain[0]  # pulled toward the distractor on the right

    def test_gt_prompt_iou_noise_free(self):
        w = build_world(with_updates(default_world_config(n_objects=20, seed=3), sigma=0.0))
        for o in range(20):
            for t in (0, 5, 9):
                m = decode(w, t, gt_prompt(w, t, o), o).default_mask
                assert mask_iou((m > 0.5).astype(float), w.gt_mask(o, t)) >= 0.9

    def test_confidence_monotone_in_offset(self):
        w = single_world()
        confs = [max(decode(w, 0, point_prompt(w, CENTER[0] + d, CENTER[1])).confidences)
                 for d in (0, 2, 5, 10, 20, 40)]
        assert all(a >= b for a, b in zip(confs, confs[1:]))
        assert confs[0] == pytest.approx(0.9)

    def test_default_candidate_is_most_confident(self):
        w = single_world()
        r = decode(w, 0, gt_prompt(w, 0))
        assert r.default_index == int(np.argmax(r.confidences)) == 0
        assert len(r.candidates) == 3

    def test_clamping(self):
        w = single_world()
        r = decode(w, 0, point_prompt(w, -40.0, 500.0))
        assert r.clamped
        assert not decode(w, 0, gt_prompt(w, 0)).clamped

    def test_slice_out_of_range(self):
        w = single_world(slices=3)
        with pytest.raises(InvalidInputError):
            decode(w, 3, gt_prompt(w, 0))

    def test_off_target_noise_grows(self):
        w = single_world(sigma=1.0, noise_gain=2.0)
        n = w.noise(0, 0)
        at_truth = attention_center(w, 0, 0, CENTER) - np.array(CENTER)
        assert at_truth == pytest.approx(n, abs=1e-12)
        c = (CENTER[0] + 12.0, CENTER[1])
        off = attention_center(w, 0, 0, c) - (np.array(CENTER) + w.config.gain * np.array([12.0, 0]))
        assert off == pytest.approx(3.0 * n, abs=1e-12)


class TestAblation:
    def test_no_ablation_matches_plain_decode(self):
        w = single_world()
        p = gt_prompt(w, 0)
        assert np.array_equal(ablated_decode(w, 0, p, []), decode(w, 0, p).default_mask)

    def test_bad_index(self):
        w = single_world()
        with pytest.raises(InvalidInputError):
            ablated_decode(w, 0, gt_prompt(w, 0), [64 * 64])

    def test_object_ablation_shrinks_mask(self):
        w = single_world()
        p = gt_prompt(w, 0)
        top = np.argsort(w.feature_grid(0, 0).ravel())[::-1][:40]
        assert ablated_decode(w, 0, p, top).sum() < decode(w, 0, p).default_mask.sum()

    def test_ccd_small_world(self):
        obj = ObjectSpec(center=(15.0, 14.0), radii=(5.0, 4.5))
        w = build_world(WorldConfig(objects=(obj,), grid=(8, 8), image=(32, 32), gain=1.1))
        oracle = WorldOracle(w, 0, 0)
        p = gt_prompt(w, 0)
        f, m, _ = oracle.decode(p)
        g = w.feature_grid(0, 0) > 0.5
        assert ccd(oracle, p, f, g.astype(float), k_frac=0.25) > 0.1


class TestLinearLoop:
    def test_affine_map(self, rng):
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=4)
        p = rng.normal(size=4)
        assert linear_loop(a, b)(3, p) == pytest.approx(a @ p + b, abs=1e-14)
        assert linear_loop(a)(0, p) == pytest.approx(a @ p, abs=1e-14)

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            linear_loop(np.array([[np.nan]]))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"slices": 0},
        {"gain": -1.0},
        {"sigma": -0.1},
        {"candidates": 0},
        {"candidates": 5},
        {"image": (4, 4)},
        {"obj": ObjectSpec(center=CENTER, radii=(0.0, 3.0))},
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfigError):
            single_world(**kw)

    def test_bad_distractor(self):
        with pytest.raises(InvalidConfigError):
            single_world(distractors=(DistractorSpec((10, 10), (0, 1), 0.3),))

    def test_no_objects(self):
        with pytest.raises(InvalidConfigError):
            build_world(WorldConfig(objects=()))

    def test_default_world_shape(self):
        cfg = default_world_config(n_objects=50, seed=2)
        assert len(cfg.objects) == 50 and len(cfg.distractors) == 50
        kicks = [math.hypot(*o.init_offset) for o in cfg.objects]
        assert 2.0 <= min(kicks) and max(kicks) <= 5.0
        assert all(d.object_id == i for i, d in enumerate(cfg.distractors))
        assert default_world_config(n_objects=50, seed=2) == cfg

    def test_shift_prompt(self):
        p = Prompt((10.0, 20.0), (5.0, 15.0, 15.0, 25.0), 100.0)
        q = shift_prompt(p, 2.0, -1.0)
        assert q.centroid == (12.0, 19.0) and q.bbox == (7.0, 14.0, 17.0, 24.0)
