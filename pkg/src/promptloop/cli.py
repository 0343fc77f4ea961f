"""Command-line entry point: simulate, metrics, compare, jacobian, correlate.

Exit codes: 0 success, 2 config, 3 trace validation, 4 empty comparison,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from promptloop.config import ExperimentConfig, load_config
from promptloop.dynamics import (
    ProximalConfig,
    estimate_jacobian,
    proximal_update,
    regularized_jacobian,
    spectral_radius,
)
from promptloop.errors import (
    InsufficientDataError,
    InvalidConfigError,
    InvalidInputError,
    JacobianEvaluationError,
    NumericalFailure,
    TraceValidationError,
)
from promptloop.grid import Prompt, weighted_centroid
from promptloop.metrics import METRIC_NAMES, MetricConfig, panels_for_records
from promptloop.stabilizer import anchor_prompt, initial_prompt, run_pipeline
from promptloop.stats import PairedSample, correlations, gap_closed, paired_permutation_test
from promptloop.synth import (
    World,
    WorldOracle,
    _decode,
    build_world,
    linear_loop,
)
from promptloop.trace_io import manifest_for, read_trace, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4, 5
KEY_COLUMNS = ("method", "slice", "object", "iteration")
METRIC_COLUMNS = KEY_COLUMNS + METRIC_NAMES + ("gt_based", "confidence", "iou")


class CliError(Exception):
    def __init__(self, code: int, message: str, details: list[str] | None = None):
        super().__init__(message)
        self.code = code
        self.details = details or []


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(path, header, rows) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if out is not sys.stdout:
            out.close()


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise CliError(EXIT_TRACE, f"cannot read {path}: {exc}") from exc


def _num(cell):
    if cell is None or cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        return None


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return load_config(args.config)


def _methods(args, cfg: ExperimentConfig) -> list[str]:
    if getattr(args, "methods", None):
        return [m.strip() for m in args.methods.split(",") if m.strip()]
    return list(cfg.run.methods)


# --- simulate -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    if cfg.preset == "affine":
        raise InvalidConfigError("affine preset only supports the jacobian command")
    seed = cfg.run.seed if args.seed is None else args.seed
    world = build_world(cfg.world_config(seed))
    out = Path(args.out)
    n_obj = min(cfg.run.objects, world.n_objects)
    for method in _methods(args, cfg):
        records = []
        for o in range(n_obj):
            records += run_pipeline(world, o, method, cfg.stabilizer, cfg.run.iterations,
                                    anchor_noise=cfg.run.anchor_noise)
        manifest = manifest_for(records, world.grid_hw, world.image_hw, seed, cfg.digest or None)
        write_trace(records, manifest, out / method)
        failures = sum(r.status != "ok" for r in records)
        print(f"{method}: records={len(records)} failures={failures} seed={seed} -> {out / method}")
    return EXIT_OK


# --- metrics --------------------------------------------------------------

def cmd_metrics(args) -> int:
    records, manifest = read_trace(args.trace)
    oracle_factory = None
    use_gt = manifest.has_gt
    metric_cfg = MetricConfig()
    if args.config is not None:
        cfg = load_config(args.config)
        use_gt = use_gt and cfg.analysis.use_gt
        metric_cfg = MetricConfig(downsample=cfg.analysis.downsample)
        if cfg.analysis.ccd and cfg.preset != "affine":
            seed = manifest.seed if manifest.seed is not None else cfg.run.seed
            world = build_world(cfg.world_config(seed))

            def oracle_factory(r):
                return WorldOracle(world, r.object, r.slice)

    panels = panels_for_records(records, manifest.image, oracle_factory, metric_cfg, use_gt)
    rows = []
    for r, p in zip(records, panels):
        d = p.as_dict()
        rows.append([r.method, r.slice, r.object, r.iteration]
                    + [d[m] for m in METRIC_NAMES] + [p.gt_based, r.confidence, r.iou])
    _write_csv(args.out, METRIC_COLUMNS, rows)
    return EXIT_OK


# --- compare --------------------------------------------------------------

def _metric_columns(*tables) -> list[str]:
    present = set.intersection(*(set(t[0].keys()) if t else set() for t in tables))
    return [c for c in METRIC_NAMES + ("iou",) if c in present]


def _index(rows, keys) -> dict:
    out = {}
    for row in rows:
        try:
            k = tuple(row[c] for c in keys)
        except KeyError as exc:
            raise CliError(EXIT_EMPTY, f"pair key column {exc} missing") from exc
        if k in out:
            raise CliError(EXIT_EMPTY, f"duplicate pair key {k}; add a key column with --pair-on")
        out[k] = row
    return out


def _mean_std(values):
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None, 0
    return float(v.mean()), (float(v.std(ddof=1)) if v.size > 1 else None), int(v.size)


def cmd_compare(args) -> int:
    keys = [k.strip() for k in args.pair_on.split(",") if k.strip()]
    tables = [_read_csv(p) for p in args.csv]
    idx = [_index(t, keys) for t in tables]
    common = sorted(set(idx[0]) & set(idx[1]))
    if not common:
        raise CliError(EXIT_EMPTY, "no overlapping pairs between the two tables")
    header = ["metric", "mean_a", "std_a", "n_a", "mean_b", "std_b", "n_b",
              "delta", "p_value", "n_pairs", "n_dropped"]
    if len(tables) == 3:
        header += ["mean_oracle", "gap_closed"]
    rows = []
    for m in _metric_columns(*tables):
        a_vals = [_num(idx[0][k].get(m)) for k in common]
        b_vals = [_num(idx[1][k].get(m)) for k in common]
        ma, sa, na = _mean_std(a_vals)
        mb, sb, nb = _mean_std(b_vals)
        samples = [PairedSample(k, vb, va) for k, va, vb in zip(common, a_vals, b_vals)]
        try:
            res = paired_permutation_test(samples, args.permutations, args.seed,
                                          method="monte_carlo")
            delta, p, n_pairs, dropped = res.mean_difference, res.p_value, res.n_pairs, res.n_dropped
        except InsufficientDataError:
            delta, p, n_pairs = None, None, 0
            dropped = len(samples)
        row = [m, ma, sa, na, mb, sb, nb, delta, p, n_pairs, dropped]
        if len(tables) == 3:
            mc, _, _ = _mean_std(_num(r.get(m)) for r in tables[2])
            gap = None
            if None not in (ma, mb, mc) and mc != ma:
                gap = gap_closed(ma, mb, mc)
            row += [mc, gap]
        rows.append(row)
    _write_csv(args.out, header, rows)
    return EXIT_OK


# --- jacobian -------------------------------------------------------------

def _affine_report(cfg: ExperimentConfig, method: str, T: int):
    gain = float(cfg.world.get("gain", 1.0))
    dim = int(cfg.world.get("affine_dim", 6))
    p_star = np.full(dim, 0.5)
    loop = linear_loop(gain * np.eye(dim), (1.0 - gain) * p_star)
    prox = cfg.stabilizer.proximal
    p = p_star + 0.01
    rows = []
    for t in range(T):
        j = estimate_jacobian(loop, t, p).matrix
        rows.append(_jacobian_row(method, 0, t, j, prox, p, p_star, loop, p_star))
        p = _step(loop, t, p, method, prox, p_star)
    return rows


def _step(loop, t, p, method, prox, anchor):
    nxt = np.asarray(loop(t, p), dtype=np.float64)
    if method == "A-Stab":
        nxt = proximal_update(nxt, anchor, p, prox)
    return nxt


def _jacobian_row(method, obj, t, j, prox: ProximalConfig, p, p_star, loop, anchor):
    rho = spectral_radius(j)
    j_reg, bound = regularized_jacobian(j, prox)
    err = float(np.linalg.norm(p - p_star))
    nxt = _step(loop, t, p, method, prox, anchor)
    err_next = float(np.linalg.norm(nxt - p_star))
    ratio = err_next / err if err > 0 else None
    return [method, obj, t, rho, spectral_radius(j_reg), bound, err, ratio]


def _centroid_loop(world: World, obj: int):
    """Map of normalized centroid ``(x/W, y/H)`` through one Method A decode."""
    h, w = world.image_hw
    scale = np.array([w, h], dtype=np.float64)

    def loop(t, v):
        c = np.asarray(v, dtype=np.float64) * scale
        prompt = Prompt((float(c[0]), float(c[1])), (c[0], c[1], c[0], c[1]), world.diag)
        r = _decode(world, obj, t, prompt)
        _, mx, my = weighted_centroid(r.default_mask)
        return np.array([mx, my]) / scale

    return loop, scale


def _world_report(cfg: ExperimentConfig, method: str, T: int, seed: int):
    world = build_world(cfg.world_config(seed))
    prox = cfg.stabilizer.proximal
    rows = []
    for obj in range(min(cfg.run.objects, world.n_objects)):
        loop, scale = _centroid_loop(world, obj)
        anchor = np.asarray(anchor_prompt(world, obj).centroid) / scale
        p = np.asarray(initial_prompt(world, obj).centroid) / scale
        for t in range(min(T, world.config.slices)):
            p_star = np.asarray(world.center(obj, t)) / scale
            j = estimate_jacobian(loop, t, p).matrix
            rows.append(_jacobian_row(method, obj, t, j, prox, p, p_star, loop, anchor))
            p = _step(loop, t, p, method, prox, anchor)
    return rows


def cmd_jacobian(args) -> int:
    cfg = _config(args)
    seed = cfg.run.seed if args.seed is None else args.seed
    header = ["method", "object", "slice", "rho", "rho_regularized", "bound",
              "error", "error_ratio"]
    methods = _methods(args, cfg)
    if not args.methods:
        # the oracle has no loop to linearize; skip it unless asked for explicitly
        methods = [m for m in methods if m != "B"]
    rows = []
    for method in methods:
        if method not in ("A", "A-Stab"):
            raise InvalidConfigError(f"jacobian supports methods A and A-Stab, got {method}")
        if cfg.preset == "affine":
            rows += _affine_report(cfg, method, cfg.run.iterations)
        else:
            rows += _world_report(cfg, method, cfg.run.iterations, seed)
    _write_csv(args.out, header, rows)
    return EXIT_OK


# --- correlate ------------------------------------------------------------

def _corr_row(level, metric, xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    if len(pairs) < 3:
        return [level, metric, len(pairs), None, None, "insufficient"]
    x, y = zip(*pairs)
    c = correlations(x, y)
    return [level, metric, c.n, c.pearson, c.spearman, "constant" if c.undefined else ""]


def cmd_correlate(args) -> int:
    rows = _read_csv(args.metrics)
    if not rows or "iou" not in rows[0]:
        raise CliError(EXIT_TRACE, f"{args.metrics}: no iou column")
    metrics = [m for m in METRIC_NAMES if m in rows[0]]
    out = []
    iou = [_num(r["iou"]) for r in rows]
    for m in metrics:
        out.append(_corr_row("call", m, [_num(r[m]) for r in rows], iou))
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r.get("method", ""), r.get("slice", "")), []).append(r)
    order = sorted(groups, key=lambda g: (g[0], int(g[1]) if g[1].isdigit() else g[1]))

    def gmean(rs, col):
        v = [x for x in (_num(r[col]) for r in rs) if x is not None]
        return float(np.mean(v)) if v else None

    g_iou = [gmean(groups[g], "iou") for g in order]
    for m in metrics:
        out.append(_corr_row("slice", m, [gmean(groups[g], m) for g in order], g_iou))
    _write_csv(args.out, ["level", "metric", "n", "pearson", "spearman", "flag"], out)
    return EXIT_OK


# --- entry ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptloop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run pipelines and write one trace per method")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--methods", help="comma-separated subset of A,A-Stab,B")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("metrics", help="metric panel per record of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", help="enables CCD when analysis.ccd is true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="paired comparison of two metric tables")
    p.add_argument("csv", nargs="+", help="baseline, treatment, and optional oracle table")
    p.add_argument("--pair-on", default="slice,object,iteration")
    p.add_argument("--permutations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("jacobian", help="per-slice spectral radius along a trajectory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--methods", help="A and/or A-Stab")
    p.add_argument("--out")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("correlate", help="metric vs IoU correlations")
    p.add_argument("metrics", help="CSV from the metrics command")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare" and len(args.csv) not in (2, 3):
        print("error: compare takes two or three CSV files", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for d in exc.diagnostics:
            print(f"  {d}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceValidationError as exc:
        print("trace validation failed:", file=sys.stderr)
        for f in exc.findings:
            print(f"  {f}", file=sys.stderr)
        return EXIT_TRACE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NumericalFailure, JacobianEvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
