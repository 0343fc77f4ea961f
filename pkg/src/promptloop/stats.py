"""Paired permutation tests, correlations, grouped aggregation and gap closed."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from promptloop import kernels
from promptloop.errors import InsufficientDataError, InvalidInputError, UndefinedGapError
from promptloop.metrics import pearson, spearman

EXACT_LIMIT = 20
TIE_TOL = 1e-12


@dataclass(frozen=True)
class PairedSample:
    key: tuple
    value_a: float | None
    value_b: float | None


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting this class

    mean_difference: float
    p_value: float
    n_pairs: int
    n_permutations: int | str
    seed: int | None
    n_dropped: int = 0


def _present(v) -> bool:
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def pair_differences(samples: Iterable[PairedSample]) -> tuple[np.ndarray, int]:
    """Differences ``a - b`` over complete pairs, plus the count of dropped pairs."""
    diffs, dropped, seen = [], 0, set()
    for s in samples:
        if s.key in seen:
            raise InvalidInputError(f"duplicate pair key {s.key!r}")
        seen.add(s.key)
        if _present(s.value_a) and _present(s.value_b):
            diffs.append(float(s.value_a) - float(s.value_b))
        else:
            dropped += 1
    return np.asarray(diffs, dtype=np.float64), dropped


def paired_permutation_test(
    samples: Sequence[PairedSample],
    n_perm: int = 2000,
    seed: int | None = 0,
    method: str = "auto",
) -> TestResult:
    """Two-sided sign-flip test on the mean paired difference.

    ``method`` is ``"exact"`` (all 2**n patterns), ``"monte_carlo"``
    (``p = (c + 1) / (N + 1)``) or ``"auto"`` (exact when n <= 20).
    """
    diffs, dropped = pair_differences(samples)
    n = diffs.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 complete pairs, got {n}")
    if method == "auto":
        method = "exact" if n <= EXACT_LIMIT else "monte_carlo"
    # scale-aware tolerance so float noise in the sums counts as a tie
    tol = TIE_TOL * max(1.0, float(np.abs(diffs).sum()))
    mean = float(diffs.mean())
    if method == "exact":
        if n > EXACT_LIMIT:
            raise InvalidInputError(f"exact enumeration limited to n <= {EXACT_LIMIT}, got {n}")
        count = kernels.signflip_exceed_exact(diffs, tol)
        return TestResult(mean, count / float(1 << n), n, "exact", seed, dropped)
    if method != "monte_carlo":
        raise InvalidInputError(f"unknown method {method!r}")
    if n_perm < 1:
        raise InvalidInputError("n_perm must be >= 1")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_perm, n), dtype=np.uint8)
    count = kernels.signflip_exceed_mc(diffs, signs, tol)
    return TestResult(mean, (count + 1) / (n_perm + 1), n, n_perm, seed, dropped)


@dataclass(frozen=True)
class Correlation:
    pearson: float | None
    spearman: float | None
    n: int
    undefined: bool = False


def correlations(x, y) -> Correlation:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise InvalidInputError("x and y must be 1-D sequences of equal length")
    if xa.size < 3:
        raise InsufficientDataError(f"need at least 3 points, got {xa.size}")
    r, rho = pearson(xa, ya), spearman(xa, ya)
    return Correlation(r, rho, int(xa.size), undefined=r is None)


@dataclass(frozen=True)
class AggregateRow:
    group: tuple
    metric: str
    mean: float | None
    std: float | None
    n: int


def aggregate_metrics(
    rows: Iterable[Mapping],
    metrics: Sequence[str],
    group_by: Sequence[str] = (),
) -> list[AggregateRow]:
    """Per-group mean and sample std for each metric; missing values are skipped per metric."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    for row in rows:
        g = tuple(row[k] for k in group_by)
        bucket = groups.setdefault(g, {m: [] for m in metrics})
        for m in metrics:
            v = row.get(m)
            if _present(v):
                bucket[m].append(float(v))
    out = []
    for g in sorted(groups, key=lambda t: tuple(map(str, t))):
        for m in metrics:
            vals = np.asarray(groups[g][m])
            n = int(vals.size)
            mean = float(vals.mean()) if n else None
            std = float(vals.std(ddof=1)) if n > 1 else None
            out.append(AggregateRow(g, m, mean, std, n))
    return out


def gap_closed(mean_a: float, mean_stab: float, mean_b: float) -> float:
    """Percentage of the A-to-oracle gap recovered by stabilization."""
    denom = mean_b - mean_a
    if denom == 0:
        raise UndefinedGapError("oracle and baseline means coincide")
    return (mean_stab - mean_a) / denom * 100.0
