"""Pipeline stages with on-disk artifacts keyed by the config hash."""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import MODALITIES
from .config import PipelineConfig
from .data import (
    CodeVocabulary,
    apply_vocab,
    build_code_vocab,
    episode_categories,
    label_matrix,
    read_corpus,
    stratified_split,
    write_corpus,
    write_manifest,
)
from .errors import ConfigHashMismatch, MissingArtifact, UnknownModality, WorkDirLocked
from .features import FeatureSet, FeatureSpace, IngestReport, read_matrix, write_matrix
from .metrics import EvalReport, evaluate, format_scope_table, prior_rank_scores, scope_report
from .models import (
    EnsembleSystem,
    averaging_scores,
    combined_baseline,
    load_system,
    save_system,
    train_confidence,
    train_ensemble,
    train_modalities,
    train_subset_ensemble,
    triage,
)
from .nn import load_model, save_model
from . import plotting
from .synth import bayes_reference, corpus_stats, generate_corpus, write_tables

log = logging.getLogger(__name__)

STAGES = ("synth", "prepare", "train", "evaluate", "scope-report", "predict")
TRAIN_PARTS = ("modalities", "ensemble", "combined", "confidence")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Workspace:
    root: Path

    @property
    def prepared(self) -> Path:
        return self.root / "prepared"

    @property
    def system(self) -> Path:
        return self.root / "system"

    @property
    def combined(self) -> Path:
        return self.root / "combined.nn"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions.jsonl"

    def ensure(self) -> None:
        for d in (self.root, self.prepared, self.reports):
            d.mkdir(parents=True, exist_ok=True)


@contextmanager
def work_lock(root: Path):
    """Exclusive lock file so two processes never write the same work dir."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkDirLocked(f"{path} exists; another run is active or crashed (remove the file to recover)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _check_hash(found: str, cfg: PipelineConfig, what: str) -> None:
    if found != cfg.hash:
        raise ConfigHashMismatch(f"{what} was produced by config {found}, current config is {cfg.hash}; "
                                 "rerun the producing stage")


def tables_path(corpus: Path) -> Path:
    return corpus.with_name(corpus.stem + ".tables.json")


# -- synth -----------------------------------------------------------------

def run_synth(cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    ws.ensure()
    episodes, tables = generate_corpus(cfg.generator)
    cfg.paths.corpus.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(cfg.paths.corpus, episodes)
    write_tables(tables_path(cfg.paths.corpus), {**tables, "config_hash": cfg.hash})
    stats = corpus_stats(episodes)
    stats["target_mean_codes"] = cfg.generator.mean_codes
    stats["mean_codes_rel_error"] = abs(stats["avg_codes_per_case"] - cfg.generator.mean_codes) / cfg.generator.mean_codes
    _write_json(ws.reports / "synth_stats.json", {"config_hash": cfg.hash, **stats})
    lines = [f"{k}={v}" for k, v in stats.items() if not isinstance(v, dict)]
    lines += [f"presence.{m}={v:.4f}" for m, v in stats["modality_presence"].items()]
    (ws.reports / "synth_stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plotting.plot_codes_per_case([len(episode_categories(ep)) for ep in episodes], ws.reports / "codes_per_case.png")
    return stats


# -- prepare ---------------------------------------------------------------

def run_prepare(cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    ws.ensure()
    if not cfg.paths.corpus.exists():
        raise MissingArtifact(f"corpus not found at {cfg.paths.corpus}; run `synth` first")
    tp = tables_path(cfg.paths.corpus)
    if tp.exists():
        _check_hash(_read_json(tp, "generator tables").get("config_hash"), cfg, "corpus")
    episodes = read_corpus(cfg.paths.corpus)
    vocab = build_code_vocab(episodes, cfg.min_support)
    kept, dropped = apply_vocab(episodes, vocab)
    train, dev, test = stratified_split(kept, cfg.split_ratios, cfg.split_seed)
    space = FeatureSpace.fit(train, cfg.features)
    out = ws.prepared
    write_manifest(out / "split.tsv", train, dev, test)
    _write_json(out / "vocab.json", {"config_hash": cfg.hash, **vocab.to_json()})
    _write_json(out / "features.json", {"config_hash": cfg.hash, **space.to_json()})
    report = IngestReport()
    for name, part in zip(SPLITS, (train, dev, test)):
        fs = space.transform(part, report)
        Y, principal = label_matrix(part, vocab)
        for m in MODALITIES:
            write_matrix(out / f"{name}.{m}.mat", fs.matrices[m], f"{name}.{m}", cfg.hash)
        write_matrix(out / f"{name}.present.mat", fs.present, f"{name}.present", cfg.hash)
        write_matrix(out / f"{name}.labels.mat", Y, f"{name}.labels", cfg.hash)
        write_matrix(out / f"{name}.principal.mat", principal[:, None], f"{name}.principal", cfg.hash)
        (out / f"{name}.ids").write_text("".join(e + "\n" for e in fs.episode_ids), encoding="utf-8")
    summary = {
        "config_hash": cfg.hash,
        "ingest": report.to_dict(),
        "episodes_read": len(episodes),
        "episodes_dropped_no_retained_label": len(dropped),
        "vocabulary_size": len(vocab),
        "split_sizes": {"train": len(train), "dev": len(dev), "test": len(test)},
        "feature_dims": space.dims,
    }
    _write_json(ws.reports / "ingest.json", summary)
    (ws.reports / "ingest.txt").write_text(_flat_text(summary), encoding="utf-8")
    _write_json(out / "stage.json", {"stage": "prepare", "config_hash": cfg.hash})
    return summary


def _flat_text(obj, prefix: str = "") -> str:
    lines = []
    for k, v in obj.items():
        if isinstance(v, dict):
            lines.append(_flat_text(v, f"{prefix}{k}.").rstrip("\n"))
        else:
            lines.append(f"{prefix}{k}={v}")
    return "\n".join(line for line in lines if line) + "\n"


@dataclass
class Prepared:
    vocab: CodeVocabulary
    space: FeatureSpace
    features: dict  # split -> FeatureSet
    labels: dict  # split -> (n, L) uint8
    principal: dict  # split -> (n,) int


def load_prepared(cfg: PipelineConfig) -> Prepared:
    ws = Workspace(cfg.paths.work_dir)
    stage = _read_json(ws.prepared / "stage.json", "prepared features (run `prepare` first)")
    _check_hash(stage["config_hash"], cfg, "prepared features")
    vocab_doc = _read_json(ws.prepared / "vocab.json", "vocabulary")
    vocab_doc.pop("config_hash", None)
    space_doc = _read_json(ws.prepared / "features.json", "feature space")
    space_doc.pop("config_hash", None)
    feats, labels, principal = {}, {}, {}

    def mat(name):
        path = ws.prepared / f"{name}.mat"
        if not path.exists():
            raise MissingArtifact(f"matrix {path} missing; rerun `prepare`")
        m, meta = read_matrix(path)
        _check_hash(meta["config_hash"], cfg, str(path))
        return m

    for split in SPLITS:
        ids = (ws.prepared / f"{split}.ids").read_text(encoding="utf-8").split()
        feats[split] = FeatureSet({m: mat(f"{split}.{m}") for m in MODALITIES},
                                  mat(f"{split}.present").astype(bool), ids)
        labels[split] = mat(f"{split}.labels").astype(np.uint8)
        principal[split] = mat(f"{split}.principal")[:, 0].astype(np.int64)
    return Prepared(CodeVocabulary.from_json(vocab_doc), FeatureSpace.from_json(space_doc), feats, labels, principal)


# -- train -----------------------------------------------------------------

def _parse_only(only: Optional[Iterable[str]]) -> list[str]:
    if not only:
        return list(TRAIN_PARTS)
    parts = []
    for item in only:
        if item not in TRAIN_PARTS and item not in MODALITIES:
            raise UnknownModality(f"unknown training target {item!r}; choose from "
                                  f"{', '.join(TRAIN_PARTS + MODALITIES)}")
        parts.append(item)
    return parts


def load_trained(cfg: PipelineConfig) -> EnsembleSystem:
    ws = Workspace(cfg.paths.work_dir)
    if not (ws.system / "manifest.json").exists():
        raise MissingArtifact(f"no trained system in {ws.system}; run `train` first")
    system, manifest = load_system(ws.system)
    _check_hash(manifest["config_hash"], cfg, "trained system")
    return system


def run_train(cfg: PipelineConfig, only: Optional[Sequence[str]] = None) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    parts = _parse_only(only)
    data = load_prepared(cfg)
    tr, dv = data.features["train"], data.features["dev"]
    Ytr, Ydv = data.labels["train"], data.labels["dev"]
    if parts == list(TRAIN_PARTS) or not (ws.system / "manifest.json").exists():
        system = EnsembleSystem(data.vocab, data.space, cfg.models)
    else:
        system = load_trained(cfg)
    done = []
    modalities = [p for p in parts if p in MODALITIES] or (list(MODALITIES) if "modalities" in parts else [])
    if modalities:
        train_modalities(system, tr, Ytr, dv, Ydv, only=modalities)
        # new modality nets invalidate anything stacked on top of them
        system.ensemble_model, system.confidence = None, None
        done += modalities
    if "ensemble" in parts:
        train_ensemble(system, tr, Ytr, dv, Ydv)
        system.confidence = None
        done.append("ensemble")
    if "confidence" in parts:
        scopes = sorted(set(cfg.evaluation.scopes) | {cfg.predict_scope})
        train_confidence(system, tr, Ytr, dv, Ydv, scopes)
        done.append("confidence")
    save_system(system, ws.system, cfg.hash)
    if "combined" in parts:
        model, hist = combined_baseline(tr, Ytr, dv, Ydv, cfg.models)
        save_model(model, ws.combined, {"config_hash": cfg.hash, "history": hist})
        system.history["combined"] = hist
        done.append("combined")
    plotting.plot_loss_history(system.history, ws.reports / "loss_history.png")
    epochs = {k: len(v["epochs"]) for k, v in system.history.items() if isinstance(v, dict) and "epochs" in v}
    summary = {"config_hash": cfg.hash, "trained": done, "epochs": epochs}
    _write_json(ws.reports / "train.json", summary)
    return summary


# -- evaluate --------------------------------------------------------------

def _table(rows: dict[str, EvalReport]) -> str:
    cols = ("lrap", "ranking_loss", "coverage_error", "micro_f1", "jaccard", "principal_accuracy", "n_records")
    width = max(len(n) for n in rows) + 2
    out = [f"{'model':<{width}}" + "".join(f"{c:>20}" for c in cols)]
    for name, rep in rows.items():
        d = rep.to_dict()
        out.append(f"{name:<{width}}" + "".join(
            f"{d[c]:>20d}" if isinstance(d[c], int) else f"{d[c]:>20.6f}" for c in cols))
    return "\n".join(out) + "\n"


def ablation_rows(system: EnsembleSystem, data: Prepared, subsets: Sequence[Sequence[str]],
                  threshold: float) -> list[tuple[tuple[str, ...], EvalReport]]:
    """Retrain the ensemble per modality subset and evaluate on the test split."""
    from .models import mask_modalities

    tr, dv, te = (data.features[s] for s in SPLITS)
    Y, P = data.labels["test"], data.principal["test"]
    for subset in subsets:
        for m in subset:
            if m not in MODALITIES:
                raise UnknownModality(f"unknown modality {m!r}; choose from {', '.join(MODALITIES)}")
    canonical_subsets = {tuple(m for m in MODALITIES if m in s) for s in subsets}
    rows = []
    for canonical in sorted(canonical_subsets, key=lambda s: (len(s), [MODALITIES.index(m) for m in s])):
        if set(canonical) == set(MODALITIES):
            scores = system.predict_scores(te)
        else:
            sub = train_subset_ensemble(system, canonical, tr, data.labels["train"], dv, data.labels["dev"])
            scores = sub.predict_scores(mask_modalities(te, canonical))
        rows.append((canonical, evaluate(scores, Y, P, threshold)))
    return rows


def run_evaluate(cfg: PipelineConfig, subsets: Optional[Sequence[Sequence[str]]] = None) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    ws.ensure()
    data = load_prepared(cfg)
    system = load_trained(cfg)
    if system.ensemble_model is None:
        raise MissingArtifact("ensemble network not trained; run `train`")
    if not ws.combined.exists():
        raise MissingArtifact(f"combined baseline missing at {ws.combined}; run `train --only combined`")
    combined, meta = load_model(ws.combined)
    _check_hash(meta.get("config_hash"), cfg, "combined baseline")
    th = cfg.evaluation.threshold
    te = data.features["test"]
    Y, P = data.labels["test"], data.principal["test"]
    mod = system.modality_scores(te)
    rows = {
        "ensemble": evaluate(system.predict_scores(te), Y, P, th),
        "combined": evaluate(combined.predict(te.combined()), Y, P, th),
        "averaging": evaluate(averaging_scores(mod, te.present), Y, P, th),
        "prior_rank": evaluate(prior_rank_scores(data.labels["train"], len(Y)), Y, P, th),
    }
    for j, m in enumerate(MODALITIES):
        rows[f"{m}_net"] = evaluate(mod[m], Y, P, th)
    oracle = _oracle(cfg, data, te.episode_ids, th)
    if oracle is not None:
        rows["bayes_oracle"] = oracle
    ablation = ablation_rows(system, data, subsets or cfg.evaluation.ablations, th)
    result = {
        "config_hash": cfg.hash,
        "models": {k: v.to_dict() for k, v in rows.items()},
        "ablation": [{"subset": list(s), **r.to_dict()} for s, r in ablation],
    }
    _write_json(ws.reports / "evaluate.json", result)
    text = _table(rows) + "\nAblation (ensemble retrained per modality subset)\n"
    text += _table({"+".join(s): r for s, r in ablation})
    (ws.reports / "evaluate.txt").write_text(text, encoding="utf-8")
    plotting.plot_model_comparison({k: rows[k].to_dict() for k in ("ensemble", "combined", "averaging")},
                                   ws.reports / "evaluate.png")
    return result


def _oracle(cfg: PipelineConfig, data: Prepared, test_ids: Sequence[str], threshold: float):
    """Bayes-posterior row when the corpus came from the generator."""
    tp = tables_path(cfg.paths.corpus)
    if not tp.exists() or not cfg.paths.corpus.exists():
        return None
    tables = _read_json(tp, "generator tables")
    wanted = set(test_ids)
    by_id = {ep.episode_id: ep for ep in read_corpus(cfg.paths.corpus, validate=False) if ep.episode_id in wanted}
    episodes = [by_id[i] for i in test_ids]
    rep, _, _ = bayes_reference(episodes, tables, data.vocab, threshold)
    return rep


# -- scope report ----------------------------------------------------------

def run_scope_report(cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    ws.ensure()
    data = load_prepared(cfg)
    system = load_trained(cfg)
    if system.confidence is None:
        raise MissingArtifact("confidence network not trained; run `train --only confidence`")
    te = data.features["test"]
    scores = system.predict_scores(te)
    conf = system.predict_confidence(te, scores)
    rows = scope_report(conf, scores, data.labels["test"], data.principal["test"], cfg.evaluation.scopes)
    result = {
        "config_hash": cfg.hash,
        "rows": [r.__dict__ for r in rows],
        "dev_thresholds": {repr(k): v for k, v in sorted(system.confidence.thresholds.items())},
    }
    _write_json(ws.reports / "scope.json", result)
    (ws.reports / "scope.txt").write_text(format_scope_table(rows), encoding="utf-8")
    plotting.plot_scope_curve(rows, ws.reports / "scope.png")
    return result


# -- predict ---------------------------------------------------------------

def run_predict(cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg.paths.work_dir)
    ws.ensure()
    system = load_trained(cfg)
    source = cfg.paths.predict_input or cfg.paths.corpus
    if not source.exists():
        raise MissingArtifact(f"prediction input not found at {source}")
    episodes = read_corpus(source)
    bundles = system.predict(system.space.transform(episodes))
    cutoff = system.confidence.cutoff(cfg.predict_scope) if system.confidence is not None else None
    with open(ws.predictions, "w", encoding="utf-8", newline="\n") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_record(system.vocab, cfg.evaluation.top_k, cutoff), sort_keys=True) + "\n")
    summary = {"config_hash": cfg.hash, "records": len(bundles), "cutoff": cutoff}
    if cutoff is not None:
        accepted, delegated = triage(bundles, cutoff)
        summary.update(accepted=len(accepted), delegated=len(delegated))
    _write_json(ws.reports / "predict.json", summary)
    return summary


def run(stage: str, cfg: PipelineConfig, only: Optional[Sequence[str]] = None,
        subsets: Optional[Sequence[Sequence[str]]] = None) -> dict:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    with work_lock(cfg.paths.work_dir):
        if stage == "synth":
            return run_synth(cfg)
        if stage == "prepare":
            return run_prepare(cfg)
        if stage == "train":
            return run_train(cfg, only)
        if stage == "evaluate":
            return run_evaluate(cfg, subsets)
        if stage == "scope-report":
            return run_scope_report(cfg)
        return run_predict(cfg)
