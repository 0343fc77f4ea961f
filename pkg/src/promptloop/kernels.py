"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback
is used. Set ``PROMPTLOOP_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from promptloop import _pykernels

python_backend = _pykernels

try:
    from promptloop import _ckernels as cython_backend
except ImportError:  # extension not built
    cython_backend = None

if cython_backend is not None and os.environ.get("PROMPTLOOP_BACKEND", "") != "python":
    backend = cython_backend
    BACKEND = "cython"
else:
    backend = python_backend
    BACKEND = "python"

js_divergence = backend.js_divergence
bilinear_upsample = backend.bilinear_upsample
soft_ellipse = backend.soft_ellipse
weighted_moments = backend.weighted_moments
signflip_exceed_mc = backend.signflip_exceed_mc
signflip_exceed_exact = backend.signflip_exceed_exact


def available_backends() -> dict:
    out = {"python": python_backend}
    if cython_backend is not None:
        out["cython"] = cython_backend
    return out
