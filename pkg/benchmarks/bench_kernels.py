"""Compare the compiled and numpy kernel backends.

Times each kernel in isolation and one end-to-end pipeline run with every
kernel routed through each backend in turn.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--objects 20] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from promptloop import kernels
from promptloop.stabilizer import run_pipeline
from promptloop.synth import build_world, default_world_config

KERNEL_NAMES = ("js_divergence", "bilinear_upsample", "soft_ellipse", "weighted_moments",
                "signflip_exceed_mc", "signflip_exceed_exact")


def kernel_cases(rng):
    p = rng.random((64, 64)); p /= p.sum()
    q = rng.random((64, 64)); q /= q.sum()
    f = rng.random((64, 64))
    w = rng.random((256, 256))
    diffs = rng.normal(size=200)
    signs = rng.integers(0, 2, size=(2000, 200), dtype=np.uint8)
    d16 = rng.normal(size=16)
    return {
        "js_divergence": lambda m: m.js_divergence(p, q, 1e-8),
        "bilinear_upsample": lambda m: m.bilinear_upsample(f, 256, 256),
        "soft_ellipse": lambda m: m.soft_ellipse(256, 256, 120.3, 131.7, 12.0, 9.0, 1.0),
        "weighted_moments": lambda m: m.weighted_moments(w),
        "signflip_exceed_mc": lambda m: m.signflip_exceed_mc(diffs, signs, 1e-12),
        "signflip_exceed_exact": lambda m: m.signflip_exceed_exact(d16, 1e-12),
    }


def best_of(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def pipeline_time(module, n_objects: int, repeat: int) -> float:
    saved = {n: getattr(kernels, n) for n in KERNEL_NAMES}
    for n in KERNEL_NAMES:
        setattr(kernels, n, getattr(module, n))
    try:
        world = build_world(default_world_config(n_objects=n_objects, seed=0))

        def run():
            for o in range(n_objects):
                run_pipeline(world, o, "A-Stab")

        return min(timeit.repeat(run, repeat=repeat, number=1))
    finally:
        for n, fn in saved.items():
            setattr(kernels, n, fn)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--objects", type=int, default=20)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    cases = kernel_cases(np.random.default_rng(0))
    results: dict[str, dict[str, float]] = {}
    for name, call in cases.items():
        results[name] = {b: best_of(lambda m=m: call(m), args.repeat) for b, m in backends.items()}
    results["pipeline (A-Stab)"] = {b: pipeline_time(m, args.objects, max(1, args.repeat // 2))
                                    for b, m in backends.items()}

    names = sorted(backends)
    print(f"{'kernel':<24}" + "".join(f"{b + ' (ms)':>16}" for b in names)
          + ("   speedup" if len(names) == 2 else ""))
    for name, row in results.items():
        line = f"{name:<24}" + "".join(f"{row[b] * 1e3:>16.4f}" for b in names)
        if len(names) == 2:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"default_backend": kernels.BACKEND, "seconds": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
