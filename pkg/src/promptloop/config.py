"""Experiment configuration: JSON document, schema validation, and object construction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from promptloop.errors import InvalidConfigError
from promptloop.stabilizer import StabilizerConfig
from promptloop.synth import (
    DistractorSpec,
    ObjectSpec,
    WorldConfig,
    default_world_config,
    with_updates,
)

WORLD_SCALARS = {f.name for f in fields(WorldConfig)} - {"objects", "distractors", "seed"}


@lru_cache(maxsize=1)
def experiment_schema() -> dict:
    text = resources.files("promptloop").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class RunSettings:
    methods: tuple[str, ...] = ("A", "A-Stab", "B")
    iterations: int = 10
    objects: int = 200
    seed: int = 0
    anchor_noise: float = 0.0


@dataclass(frozen=True)
class AnalysisSettings:
    permutations: int = 2000
    group_by: tuple[str, ...] = ("method",)
    ccd: bool = False
    use_gt: bool = True
    downsample: str = "area"


@dataclass(frozen=True)
class ExperimentConfig:
    world: dict = field(default_factory=dict)
    stabilizer: StabilizerConfig = StabilizerConfig()
    run: RunSettings = RunSettings()
    analysis: AnalysisSettings = AnalysisSettings()
    digest: str = ""

    @property
    def preset(self) -> str:
        return self.world.get("preset", "explicit" if "objects" in self.world else "default")

    def world_config(self, seed: int | None = None) -> WorldConfig:
        """Build the synthetic world; ``seed`` overrides ``run.seed``."""
        seed = self.run.seed if seed is None else seed
        w = self.world
        scalars = {k: v for k, v in w.items() if k in WORLD_SCALARS}
        for key in ("grid", "image", "candidate_scales", "confidence_base"):
            if key in scalars:
                scalars[key] = tuple(scalars[key])
        if self.preset == "explicit":
            objects = tuple(
                ObjectSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                for o in w.get("objects", [])
            )
            distractors = tuple(
                DistractorSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
                for d in w.get("distractors", [])
            )
            if not objects:
                raise InvalidConfigError("explicit world needs at least one object",
                                         ["world.objects: empty"])
            return WorldConfig(objects=objects, distractors=distractors, seed=seed, **scalars)
        base_keys = ("slices", "gain", "sigma", "image", "grid")
        extra = {}
        if "drift" in w:
            extra["drift"] = w["drift"]
        if "init_offset_range" in w:
            extra["init_offset"] = tuple(w["init_offset_range"])
        base = default_world_config(
            n_objects=self.run.objects, seed=seed, pull=w.get("pull", 0.3),
            **{k: scalars.pop(k) for k in base_keys if k in scalars}, **extra,
        )
        return with_updates(base, **scalars)


def _locate(text: str) -> dict[tuple, int]:
    """Map each JSON path to the line where its value starts."""
    decoder = json.JSONDecoder()
    where: dict[tuple, int] = {}

    def skip(i):
        while i < len(text) and text[i] in " \t\r\n":
            i += 1
        return i

    def value(i, path):
        i = skip(i)
        where[path] = text.count("\n", 0, i) + 1
        if text[i] == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, skip(i) + 1)
                i = skip(i) + 1  # colon
                i = skip(value(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1
        if text[i] == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            n = 0
            while True:
                i = skip(value(i, path + (n,)))
                n += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        return decoder.raw_decode(text, i)[1]

    value(0, ())
    return where


def validate_document(text: str) -> dict:
    """Parse and schema-check a config document, collecting every violation."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError("config is not valid JSON",
                                 [f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    validator = jsonschema.Draft202012Validator(experiment_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = _locate(text)
        diags = []
        for e in errors:
            path = tuple(e.absolute_path)
            line = lines.get(path, 1)
            dotted = ".".join(map(str, path)) or "<root>"
            diags.append(f"line {line}: {dotted}: {e.message}")
        raise InvalidConfigError(f"config has {len(diags)} schema violation(s)", diags)
    return doc


def from_document(doc: dict, digest: str = "") -> ExperimentConfig:
    run = dict(doc.get("run", {}))
    if "methods" in run:
        run["methods"] = tuple(run["methods"])
    analysis = dict(doc.get("analysis", {}))
    if "group_by" in analysis:
        analysis["group_by"] = tuple(analysis["group_by"])
    try:
        return ExperimentConfig(
            world=dict(doc.get("world", {})),
            stabilizer=StabilizerConfig(**doc.get("stabilizer", {})),
            run=RunSettings(**run),
            analysis=AnalysisSettings(**analysis),
            digest=digest,
        )
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(str(exc), [str(exc)]) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    doc = validate_document(text)
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    return from_document(doc, digest)


def default_document() -> dict:
    """Every section filled with its default value."""
    return {
        "world": {"preset": "default"},
        "stabilizer": asdict(StabilizerConfig()),
        "run": {**asdict(RunSettings()), "methods": list(RunSettings().methods)},
        "analysis": {**asdict(AnalysisSettings()), "group_by": list(AnalysisSettings().group_by)},
    }
