from __future__ import annotations

import sys

import numpy as np
import pytest

from promptloop import kernels

KERNEL_NAMES = (
    "js_divergence",
    "bilinear_upsample",
    "soft_ellipse",
    "weighted_moments",
    "signflip_exceed_mc",
    "signflip_exceed_exact",
)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the duration of a test."""
    mod = kernels.available_backends()[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_distribution(rng, shape=(8, 8), sparsity=0.0):
    x = rng.random(shape)
    if sparsity:
        x[rng.random(shape) < sparsity] = 0.0
    if x.sum() == 0:
        x.flat[0] = 1.0
    return x / x.sum()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
