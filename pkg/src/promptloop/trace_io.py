"""On-disk trace format shared by simulated runs and external decoder dumps.

Layout of a trace directory::

    manifest.json     format version, dims, record count, presence flags
    meta.csv          one row per record: method, slice, object, iteration,
                      confidence, iou, status
    attention.f32     N*Hf*Wf little-endian float32, row-major, record-major
    masks_pred.f32    same layout
    masks_gt.f32      same layout, only when manifest says has_gt
    prompts.f32       N*6 float32: cx, cy, x1, y1, x2, y2 in pixels

Row order in ``meta.csv`` matches the record order of every binary file.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from promptloop.errors import TraceValidationError
from promptloop.grid import Prompt, image_diag

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
META_COLUMNS = ("method", "slice", "object", "iteration", "confidence", "iou", "status")
F32 = np.dtype("<f4")


@dataclass
class TraceRecord:
    method: str
    slice: int
    object: int
    iteration: int
    prompt: Prompt
    attention: np.ndarray
    mask_pred: np.ndarray
    mask_gt: np.ndarray | None = None
    confidence: float | None = None
    iou: float | None = None
    status: str = "ok"

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.slice, self.object, self.iteration)


@dataclass
class TraceManifest:
    grid: tuple[int, int]
    image: tuple[int, int]
    n_records: int
    methods: list[str]
    has_gt: bool = False
    has_confidence: bool = True
    has_iou: bool = False
    has_features: bool = False
    seed: int | None = None
    config_digest: str | None = None
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "grid": list(self.grid),
            "image": list(self.image),
            "n_records": self.n_records,
            "methods": list(self.methods),
            "fields": {
                "gt_masks": self.has_gt,
                "confidences": self.has_confidence,
                "iou": self.has_iou,
                "feature_grids": self.has_features,
            },
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TraceManifest":
        flags = doc.get("fields", {})
        return cls(
            grid=tuple(int(v) for v in doc["grid"]),
            image=tuple(int(v) for v in doc["image"]),
            n_records=int(doc["n_records"]),
            methods=list(doc.get("methods", [])),
            has_gt=bool(flags.get("gt_masks", False)),
            has_confidence=bool(flags.get("confidences", True)),
            has_iou=bool(flags.get("iou", False)),
            has_features=bool(flags.get("feature_grids", False)),
            seed=doc.get("seed"),
            config_digest=doc.get("config_digest"),
            format_version=int(doc["format_version"]),
        )


def manifest_for(records: list[TraceRecord], grid, image, seed=None, config_digest=None) -> TraceManifest:
    methods = sorted({r.method for r in records})
    return TraceManifest(
        grid=tuple(grid),
        image=tuple(image),
        n_records=len(records),
        methods=methods,
        has_gt=bool(records) and all(r.mask_gt is not None for r in records),
        has_confidence=all(r.confidence is not None for r in records),
        has_iou=bool(records) and any(r.iou is not None for r in records),
        seed=seed,
        config_digest=config_digest,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    # repr round-trips through float() exactly
    return repr(float(value))


def write_trace(records: list[TraceRecord], manifest: TraceManifest, path) -> None:
    path = Path(path)
    gh, gw = manifest.grid
    if manifest.n_records != len(records):
        raise ValueError(f"manifest says {manifest.n_records} records, got {len(records)}")
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "manifest.json", "w") as fh:
            json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(path / "meta.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(META_COLUMNS)
            for r in records:
                writer.writerow([r.method, r.slice, r.object, r.iteration,
                                 _fmt(r.confidence), _fmt(r.iou), r.status])

        def dump(name, arrays, shape):
            data = np.zeros((len(arrays),) + shape, dtype=F32)
            for i, a in enumerate(arrays):
                data[i] = np.asarray(a, dtype=np.float64).reshape(shape)
            with open(path / name, "wb") as fh:
                fh.write(data.tobytes(order="C"))

        dump("attention.f32", [r.attention for r in records], (gh, gw))
        dump("masks_pred.f32", [r.mask_pred for r in records], (gh, gw))
        gt_file = path / "masks_gt.f32"
        if manifest.has_gt:
            dump("masks_gt.f32", [r.mask_gt for r in records], (gh, gw))
        elif gt_file.exists():
            gt_file.unlink()
        dump("prompts.f32", [r.prompt.as_array() for r in records], (6,))
    except OSError as exc:
        raise OSError(f"failed writing trace to {path}: {exc}") from exc


def _expected_sizes(manifest: TraceManifest) -> dict[str, int]:
    gh, gw = manifest.grid
    n = manifest.n_records
    sizes = {
        "attention.f32": n * gh * gw * 4,
        "masks_pred.f32": n * gh * gw * 4,
        "prompts.f32": n * 6 * 4,
    }
    if manifest.has_gt:
        sizes["masks_gt.f32"] = n * gh * gw * 4
    return sizes


def validate_trace(path) -> list[str]:
    """Every violation found in a trace directory; an empty list means valid."""
    path = Path(path)
    findings: list[str] = []
    mpath = path / "manifest.json"
    if not mpath.is_file():
        return [f"missing manifest: {mpath}"]
    try:
        manifest = TraceManifest.from_json(json.loads(mpath.read_text()))
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        return [f"manifest.json unreadable: {exc!r}"]
    if manifest.format_version not in SUPPORTED_VERSIONS:
        findings.append(f"manifest.json: unknown format_version {manifest.format_version}")
    if len(manifest.grid) != 2 or len(manifest.image) != 2:
        findings.append("manifest.json: grid and image must each have two entries")
        return findings
    if manifest.n_records < 0 or min(manifest.grid) < 1:
        findings.append("manifest.json: negative record count or empty grid")
        return findings

    meta = path / "meta.csv"
    if not meta.is_file():
        findings.append("meta.csv: missing")
    else:
        with open(meta, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != META_COLUMNS:
            findings.append(f"meta.csv: header must be {','.join(META_COLUMNS)}")
        n_rows = max(0, len(rows) - 1)
        if n_rows != manifest.n_records:
            findings.append(f"meta.csv: manifest N={manifest.n_records} but {n_rows} rows")
        for i, row in enumerate(rows[1:]):
            if len(row) != len(META_COLUMNS):
                findings.append(f"meta.csv: row {i} has {len(row)} fields")
                continue
            try:
                int(row[1]), int(row[2]), int(row[3])
                for cell in row[4:6]:
                    if cell != "":
                        float(cell)
            except ValueError:
                findings.append(f"meta.csv: row {i} has non-numeric key or value")

    gh, gw = manifest.grid
    for name, expected in _expected_sizes(manifest).items():
        fpath = path / name
        if not fpath.is_file():
            findings.append(f"{name}: missing")
            continue
        actual = fpath.stat().st_size
        if actual != expected:
            findings.append(f"{name}: expected {expected} bytes, found {actual}")
            continue
        if name in ("attention.f32", "masks_pred.f32", "masks_gt.f32", "prompts.f32"):
            per = 6 if name == "prompts.f32" else gh * gw
            data = np.fromfile(fpath, dtype=F32).reshape(manifest.n_records, per)
            bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
            for idx in bad:
                findings.append(f"{name}: non-finite value in record {int(idx)}")
            if name == "attention.f32":
                for idx in np.flatnonzero((data < 0).any(axis=1)):
                    findings.append(f"{name}: negative attention in record {int(idx)}")
    return findings


def read_trace(path) -> tuple[list[TraceRecord], TraceManifest]:
    path = Path(path)
    findings = validate_trace(path)
    if findings:
        raise TraceValidationError(findings)
    manifest = TraceManifest.from_json(json.loads((path / "manifest.json").read_text()))
    n = manifest.n_records
    gh, gw = manifest.grid

    def load(name, shape):
        return np.fromfile(path / name, dtype=F32).reshape((n,) + shape)

    attention = load("attention.f32", (gh, gw))
    masks_pred = load("masks_pred.f32", (gh, gw))
    masks_gt = load("masks_gt.f32", (gh, gw)) if manifest.has_gt else None
    prompts = load("prompts.f32", (6,))
    with open(path / "meta.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    diag = image_diag(*manifest.image)

    def opt(cell):
        return float(cell) if cell != "" else None

    records = []
    for i, row in enumerate(rows):
        records.append(TraceRecord(
            method=row["method"],
            slice=int(row["slice"]),
            object=int(row["object"]),
            iteration=int(row["iteration"]),
            prompt=Prompt.from_array(prompts[i].astype(np.float64), diag),
            attention=attention[i].astype(np.float64),
            mask_pred=masks_pred[i].astype(np.float64),
            mask_gt=None if masks_gt is None else masks_gt[i].astype(np.float64),
            confidence=opt(row["confidence"]),
            iou=opt(row["iou"]),
            status=row["status"],
        ))
    return records, manifest


def quantize(record: TraceRecord) -> TraceRecord:
    """Round a record's array fields through float32, as storage does.

    Scalars in ``meta.csv`` are written with ``repr`` and survive unchanged.
    """
    def q(a):
        return None if a is None else np.asarray(a, dtype=F32).astype(np.float64)

    def qs(v):
        return None if v is None else float(v)

    p = q(record.prompt.as_array())
    return TraceRecord(record.method, record.slice, record.object, record.iteration,
                       Prompt.from_array(p, record.prompt.image_diag), q(record.attention),
                       q(record.mask_pred), q(record.mask_gt), qs(record.confidence),
                       qs(record.iou), record.status)
