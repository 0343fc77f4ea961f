"""Both kernel backends against independent references."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from promptloop import kernels
from promptloop._pykernels import TAIL

torch = pytest.importorskip("torch")

BACKENDS = kernels.available_backends()


def test_python_backend_always_present():
    assert "python" in BACKENDS
    assert kernels.BACKEND in ("python", "cython")


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_js_matches_direct_formula(name, rng):
    mod = BACKENDS[name]
    for _ in range(20):
        p = rng.random(30); p /= p.sum()
        q = rng.random(30); q /= q.sum()
        m = 0.5 * (p + q)
        eps = 1e-8
        ref = 0.5 * sum(pi * (math.log2(pi + eps) - math.log2(mi + eps)) for pi, mi in zip(p, m))
        ref += 0.5 * sum(qi * (math.log2(qi + eps) - math.log2(mi + eps)) for qi, mi in zip(q, m))
        assert mod.js_divergence(p, q, eps) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("shape,out", [((2, 2), (4, 4)), ((3, 5), (12, 20)), ((4, 4), (7, 9)), ((1, 2), (1, 4))])
def test_bilinear_matches_torch(name, shape, out, rng):
    f = rng.random(shape)
    ref = torch.nn.functional.interpolate(
        torch.from_numpy(f)[None, None], size=out, mode="bilinear", align_corners=False
    )[0, 0].numpy()
    np.testing.assert_allclose(BACKENDS[name].bilinear_upsample(f, *out), ref, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_soft_ellipse_matches_dense_logistic(name):
    h, w, cx, cy, rx, ry, edge = 40, 50, 21.3, 17.8, 6.5, 4.2, 1.0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    gain = math.sqrt(rx * ry) / (2 * edge)
    dense = 1.0 / (1.0 + np.exp(-gain * (1 - ((xx - cx) / rx) ** 2 - ((yy - cy) / ry) ** 2)))
    got = BACKENDS[name].soft_ellipse(h, w, cx, cy, rx, ry, edge)
    # outside the window values are below exp(-TAIL) and stored as zero
    np.testing.assert_allclose(got, dense, atol=math.exp(-TAIL) * 1.01, rtol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_weighted_moments(name):
    g = np.zeros((6, 7))
    g[0, 0], g[0, 4] = 1.0, 3.0
    assert BACKENDS[name].weighted_moments(g) == pytest.approx((4.0, 3.0, 0.0))
    assert BACKENDS[name].weighted_moments(np.zeros((3, 3))) == (0.0, 0.0, 0.0)


def _brute_exact(d, tol):
    obs = abs(sum(d))
    return sum(
        abs(sum(s * x for s, x in zip(signs, d))) >= obs - tol
        for signs in itertools.product((-1.0, 1.0), repeat=len(d))
    )


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("n", [1, 2, 5, 9])
def test_signflip_exact_matches_itertools(name, n, rng):
    d = rng.normal(size=n)
    assert BACKENDS[name].signflip_exceed_exact(d, 1e-12) == _brute_exact(d, 1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_signflip_mc_matches_direct_loop(name, rng):
    d = rng.normal(size=12)
    signs = rng.integers(0, 2, size=(300, 12), dtype=np.uint8)
    obs = abs(d.sum())
    ref = sum(abs(((2.0 * row - 1.0) * d).sum()) >= obs - 1e-12 for row in signs)
    assert BACKENDS[name].signflip_exceed_mc(d, signs, 1e-12) == ref


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
def test_backends_agree_on_random_inputs(rng):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    for _ in range(10):
        p = rng.random((16, 16)); p /= p.sum()
        q = rng.random((16, 16)); q /= q.sum()
        assert cy.js_divergence(p, q, 1e-8) == pytest.approx(py.js_divergence(p, q, 1e-8), abs=1e-14)
        f = rng.random((8, 8))
        np.testing.assert_allclose(cy.bilinear_upsample(f, 32, 32), py.bilinear_upsample(f, 32, 32), atol=1e-14)
        args = (64, 64, *rng.uniform(10, 50, 2), *rng.uniform(2, 12, 2), 1.0)
        np.testing.assert_allclose(cy.soft_ellipse(*args), py.soft_ellipse(*args), atol=1e-15)
        np.testing.assert_allclose(cy.weighted_moments(f), py.weighted_moments(f), rtol=1e-13)
    d = rng.normal(size=14)
    assert cy.signflip_exceed_exact(d, 1e-12) == py.signflip_exceed_exact(d, 1e-12)
