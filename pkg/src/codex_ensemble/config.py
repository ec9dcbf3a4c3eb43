"""Pipeline configuration: one YAML document that fully determines a run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from . import MODALITIES
from .errors import SchemaViolation, SpecInvalid, UnknownModality
from .features import FeatureConfig
from .metrics import DEFAULT_SCOPES
from .models import ModelConfig
from .nn import TrainConfig
from .synth import GeneratorSpec

SCHEMA_VERSION = 1
_SECTIONS = {"schema_version", "paths", "generator", "features", "vocab", "split", "models", "evaluation", "predict"}

DEFAULT_ABLATIONS = (
    ("medications",),
    ("medications", "lab"),
    ("medications", "lab", "radiology"),
    ("lab", "medications", "radiology", "admission"),
)


@dataclass(frozen=True)
class Paths:
    corpus: Path
    work_dir: Path
    predict_input: Optional[Path] = None  # defaults to the corpus


@dataclass(frozen=True)
class EvaluationConfig:
    threshold: float = 0.5
    scopes: tuple = DEFAULT_SCOPES
    ablations: tuple = DEFAULT_ABLATIONS
    top_k: int = 5


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths
    generator: GeneratorSpec = GeneratorSpec()
    features: FeatureConfig = FeatureConfig()
    min_support: int = 3
    split_ratios: tuple = (0.70, 0.10, 0.20)
    split_seed: int = 0
    models: ModelConfig = ModelConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    predict_scope: float = 0.5
    source: Optional[Path] = None

    def content(self) -> dict:
        """Everything that influences results (paths excluded)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "generator": self.generator.to_dict(),
            "features": self.features.to_dict(),
            "vocab": {"min_support": self.min_support},
            "split": {"ratios": list(self.split_ratios), "seed": self.split_seed},
            "models": self.models.to_dict(),
            "evaluation": {
                "threshold": self.evaluation.threshold,
                "scopes": list(self.evaluation.scopes),
                "ablations": [list(a) for a in self.evaluation.ablations],
                "top_k": self.evaluation.top_k,
            },
            "predict": {"scope": self.predict_scope},
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name) or {}
    if not isinstance(value, dict):
        raise SchemaViolation(f"config section {name!r} must be a mapping")
    return value


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise SchemaViolation(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(f"{where}: {exc}") from exc


def parse_config(doc: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise SchemaViolation("config must be a mapping")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise SchemaViolation(f"unknown config sections: {', '.join(sorted(unknown))}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaViolation(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")

    p = _section(doc, "paths")
    if "corpus" not in p or "work_dir" not in p:
        raise SchemaViolation("paths.corpus and paths.work_dir are required")
    resolve = lambda v: None if v is None else (base_dir / v).resolve()
    paths = Paths(resolve(p["corpus"]), resolve(p["work_dir"]), resolve(p.get("predict_input")))

    generator = _build(GeneratorSpec, _section(doc, "generator"), "generator")
    try:
        generator.validate()
    except SpecInvalid as exc:
        raise SchemaViolation(f"generator: {exc}") from exc
    feats = dict(_section(doc, "features"))
    if "age_edges" in feats:
        feats["age_edges"] = tuple(feats["age_edges"])
    features = _build(FeatureConfig, feats, "features")

    m = dict(_section(doc, "models"))
    if "train" in m:
        m["train"] = _build(TrainConfig, _section(m, "train"), "models.train")
    models = _build(ModelConfig, m, "models")

    ev = dict(_section(doc, "evaluation"))
    if "scopes" in ev:
        ev["scopes"] = tuple(float(s) for s in ev["scopes"])
    if "ablations" in ev:
        ev["ablations"] = tuple(tuple(a) for a in ev["ablations"])
        for subset in ev["ablations"]:
            for name in subset:
                if name not in MODALITIES:
                    raise UnknownModality(name)
    evaluation = _build(EvaluationConfig, ev, "evaluation")

    split = _section(doc, "split")
    return PipelineConfig(
        paths=paths,
        generator=generator,
        features=features,
        min_support=int(_section(doc, "vocab").get("min_support", 3)),
        split_ratios=tuple(split.get("ratios", (0.70, 0.10, 0.20))),
        split_seed=int(split.get("seed", 0)),
        models=models,
        evaluation=evaluation,
        predict_scope=float(_section(doc, "predict").get("scope", 0.5)),
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SchemaViolation(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise SchemaViolation(f"config is not valid YAML: {exc}") from exc
    cfg = parse_config(doc, path.parent)
    return dataclasses.replace(cfg, source=path)


def default_config_text() -> str:
    return resources.files("codex_ensemble.configs").joinpath("desk.yaml").read_text(encoding="utf-8")
