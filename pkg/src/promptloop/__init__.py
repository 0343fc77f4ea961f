"""Closed-loop prompt feedback for promptable segmentation.

Coupling metrics over cached attention grids, prompt-space loop dynamics,
a proximal stabilizer, a synthetic decoder world, statistics, and a trace
format, all reachable from the ``promptloop`` command.
"""

from promptloop.dynamics import (
    ProximalConfig,
    estimate_jacobian,
    proximal_update,
    regularized_jacobian,
    simulate_trajectory,
    spectral_radius,
)
from promptloop.grid import (
    EPS,
    Prompt,
    downsample_mask,
    js_divergence,
    mask_moments,
    normalize_attention,
    upsample_attention,
)
from promptloop.kernels import BACKEND
from promptloop.metrics import MetricConfig, MetricPanel, metric_panel, panels_for_records
from promptloop.stabilizer import PipelineMethod, StabilizerConfig, run_pipeline
from promptloop.stats import (
    PairedSample,
    aggregate_metrics,
    correlations,
    gap_closed,
    paired_permutation_test,
)
from promptloop.synth import WorldConfig, build_world, decode, default_world_config, gt_prompt
from promptloop.trace_io import TraceManifest, TraceRecord, read_trace, validate_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "EPS", "MetricConfig", "MetricPanel", "PairedSample", "PipelineMethod",
    "Prompt", "ProximalConfig", "StabilizerConfig", "TraceManifest", "TraceRecord",
    "WorldConfig", "aggregate_metrics", "build_world", "correlations", "decode",
    "default_world_config", "downsample_mask", "estimate_jacobian", "gap_closed",
    "gt_prompt", "js_divergence", "mask_moments", "metric_panel", "normalize_attention",
    "paired_permutation_test", "panels_for_records", "proximal_update", "read_trace",
    "regularized_jacobian", "run_pipeline", "simulate_trajectory", "spectral_radius",
    "upsample_attention", "validate_trace", "write_trace",
]
