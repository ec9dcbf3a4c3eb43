"""Per-modality networks, the stacked ensemble, baselines and the confidence regressor."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import MODALITIES
from .data import CodeVocabulary, EpisodeRecord
from .errors import (
    AllAbsent,
    BadScope,
    EmptyDataset,
    MissingArtifact,
    MissingConfidence,
    ModalityModelsMissing,
    ShapeMismatch,
    SystemUntrained,
    UnknownModality,
)
from .features import FeatureSet, FeatureSpace
from .metrics import DEFAULT_SCOPES, jaccard_per_record, selection_size
from .nn import MlpModel, NetworkSpec, TrainConfig, init_mlp, load_model, save_model, train

log = logging.getLogger(__name__)

CONFIDENCE_INPUTS = ("sorted_scores", "scores", "features+scores")
_NET_SEED = {"lab": 1, "medications": 2, "radiology": 3, "admission": 4,
             "ensemble": 5, "combined": 6, "confidence": 7}


@dataclass(frozen=True)
class ModelConfig:
    hidden: dict = field(default_factory=lambda: {
        "lab": (96,), "medications": (128,), "radiology": (128, 128), "admission": (16,)})
    dropout: dict = field(default_factory=lambda: {
        "lab": 0.3, "medications": 0.35, "radiology": 0.25, "admission": 0.2})
    ensemble_hidden: Optional[int] = None  # None: |vocab|
    ensemble_dropout: float = 0.0
    mask_prob: float = 0.15
    augment_copies: int = 1
    confidence_hidden: tuple = (64,)
    confidence_inputs: str = "sorted_scores"  # see CONFIDENCE_INPUTS
    confidence_dropout: float = 0.2
    confidence_folds: int = 5
    threshold: float = 0.5
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        for m in (*self.hidden, *self.dropout):
            if m not in MODALITIES:
                raise UnknownModality(m)
        object.__setattr__(self, "hidden", {m: tuple(int(h) for h in v) for m, v in self.hidden.items()})
        object.__setattr__(self, "confidence_hidden", tuple(self.confidence_hidden))
        if self.confidence_inputs not in CONFIDENCE_INPUTS:
            raise ValueError(f"confidence_inputs must be one of {CONFIDENCE_INPUTS}")

    def seeded(self, name: str) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.train.seed * 100 + _NET_SEED[name])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = {m: list(v) for m, v in self.hidden.items()}
        d["confidence_hidden"] = list(self.confidence_hidden)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if "train" in obj:
            obj["train"] = TrainConfig(**obj["train"])
        return cls(**obj)


def _modality_spec(input_dim: int, n_labels: int, hidden: Sequence[int], rate: float) -> NetworkSpec:
    return NetworkSpec(input_dim, tuple(hidden), n_labels, (rate,) * len(hidden), "sigmoid")


def train_modality_net(
    modality: str,
    X,
    Y,
    present,
    X_dev=None,
    Y_dev=None,
    present_dev=None,
    config: ModelConfig = ModelConfig(),
) -> tuple[MlpModel, dict]:
    """Fit one modality network on the rows where that modality is present."""
    if modality not in MODALITIES:
        raise UnknownModality(modality)
    X, Y = np.asarray(X), np.asarray(Y)
    if len(X) != len(Y):
        raise ShapeMismatch(f"{len(X)} feature rows vs {len(Y)} label rows")
    keep = np.asarray(present, dtype=bool)
    if not keep.any():
        raise EmptyDataset(f"no training episodes with {modality} present")
    dev = None
    if X_dev is not None:
        dk = np.asarray(present_dev, dtype=bool)
        dev = (np.asarray(X_dev)[dk], np.asarray(Y_dev)[dk])
    spec = _modality_spec(X.shape[1], Y.shape[1], config.hidden[modality], config.dropout[modality])
    tc = config.seeded(modality)
    model = init_mlp(spec, tc.seed)
    return train(model, X[keep], Y[keep], *(dev or (None, None)), config=tc, loss="bce")


def assemble_ensemble_input(scores: dict, present) -> np.ndarray:
    """[lab | medications | radiology | admission | 4 presence flags], rows or a single vector."""
    flags = np.asarray(present, dtype=np.float64)
    single = flags.ndim == 1
    flags = np.atleast_2d(flags)
    if flags.shape[1] != len(MODALITIES):
        raise ShapeMismatch(f"need {len(MODALITIES)} presence flags, got {flags.shape[1]}")
    blocks = []
    width = None
    for j, m in enumerate(MODALITIES):
        if m not in scores:
            raise ShapeMismatch(f"missing score block for {m}")
        s = np.atleast_2d(np.asarray(scores[m], dtype=np.float64))
        if s.shape[0] != flags.shape[0] or (width is not None and s.shape[1] != width):
            raise ShapeMismatch(f"score block {m} has shape {s.shape}")
        width = s.shape[1]
        blocks.append(s * flags[:, j:j + 1])
    out = np.hstack(blocks + [flags])
    return out[0] if single else out


def averaging_baseline(scores: dict, present) -> np.ndarray:
    """Unweighted mean of the present modalities' score vectors."""
    flags = np.asarray(present, dtype=bool)
    if not flags.any():
        raise AllAbsent("no modality present")
    return np.mean([np.asarray(scores[m], dtype=np.float64) for j, m in enumerate(MODALITIES) if flags[j]], axis=0)


def averaging_scores(scores: dict, present) -> np.ndarray:
    """Row-wise ``averaging_baseline``; rows with nothing present score all zeros."""
    flags = np.asarray(present, dtype=np.float64)
    total = sum(np.asarray(scores[m]) * flags[:, j:j + 1] for j, m in enumerate(MODALITIES))
    n = flags.sum(axis=1, keepdims=True)
    return np.divide(total, n, out=np.zeros_like(total), where=n > 0)


def discrepancy(scores, truth, threshold: float = 0.5) -> np.ndarray | float:
    """1 - Jaccard between the thresholded prediction and the true label set."""
    S, T = np.asarray(scores, dtype=np.float64), np.asarray(truth)
    if S.shape != T.shape:
        raise ShapeMismatch(f"scores {S.shape} vs truth {T.shape}")
    if S.ndim == 1:
        return float(1.0 - jaccard_per_record(S[None], T[None], threshold)[0])
    return 1.0 - jaccard_per_record(S, T, threshold)


def mask_modalities(fs: FeatureSet, keep: Sequence[str]) -> FeatureSet:
    """Treat every modality outside ``keep`` as absent."""
    for m in keep:
        if m not in MODALITIES:
            raise UnknownModality(m)
    present = fs.present.copy()
    mats = dict(fs.matrices)
    for j, m in enumerate(MODALITIES):
        if m not in keep:
            present[:, j] = False
            mats[m] = np.zeros_like(fs.matrices[m])
    return FeatureSet(mats, present, list(fs.episode_ids))


# -- confidence ------------------------------------------------------------

def confidence_threshold(dev_confidences, scope: float) -> float:
    """Cutoff whose acceptance set on dev holds the ceil(scope*N) most confident records."""
    if not 0.0 < scope <= 1.0:
        raise BadScope(f"scope {scope} outside (0, 1]")
    c = np.sort(np.asarray(dev_confidences, dtype=np.float64))[::-1]
    if len(c) == 0:
        raise EmptyDataset("no dev confidences")
    return float(c[selection_size(scope, len(c)) - 1])


def confidence_input(features: np.ndarray, scores: np.ndarray, inputs: str) -> np.ndarray:
    """Regressor input. "sorted_scores" drops label identity and keeps the score profile
    (top score, margins, tail mass), which is what tracks how wrong a prediction set is."""
    scores = np.asarray(scores, dtype=np.float64)
    if inputs == "sorted_scores":
        return -np.sort(-scores, axis=1)
    return np.hstack([features, scores]) if inputs == "features+scores" else scores


@dataclass
class ConfidenceModel:
    regressor: MlpModel
    thresholds: dict = field(default_factory=dict)  # scope -> cutoff
    inputs: str = "scores"

    def predict(self, features: np.ndarray, scores: np.ndarray) -> np.ndarray:
        pred = self.regressor.predict(confidence_input(features, scores, self.inputs))[:, 0]
        return 1.0 - np.clip(pred, 0.0, 1.0)

    def cutoff(self, scope: float) -> float:
        if scope not in self.thresholds:
            raise BadScope(f"no threshold fitted for scope {scope}")
        return self.thresholds[scope]


# -- the system ------------------------------------------------------------

@dataclass
class PredictionBundle:
    episode_id: str
    modality_scores: dict
    presence: tuple
    ensemble_scores: np.ndarray
    confidence: Optional[float] = None

    @property
    def principal(self) -> int:
        return int(np.argmax(self.ensemble_scores))

    def to_record(self, vocab: CodeVocabulary, top_k: int = 5, cutoff: Optional[float] = None) -> dict:
        order = np.argsort(-self.ensemble_scores, kind="stable")[:top_k]
        rec = {
            "episode_id": self.episode_id,
            "top": [[vocab.categories[i], round(float(self.ensemble_scores[i]), 6)] for i in order],
            "principal": vocab.categories[self.principal],
            "confidence": None if self.confidence is None else round(float(self.confidence), 6),
        }
        if cutoff is not None and self.confidence is not None:
            rec["decision"] = "accept" if self.confidence >= cutoff else "delegate"
        return rec


@dataclass
class EnsembleSystem:
    vocab: CodeVocabulary
    space: FeatureSpace
    config: ModelConfig = ModelConfig()
    modality_models: dict = field(default_factory=dict)
    ensemble_model: Optional[MlpModel] = None
    confidence: Optional[ConfidenceModel] = None
    history: dict = field(default_factory=dict)

    def _require_modalities(self):
        missing = [m for m in MODALITIES if m not in self.modality_models]
        if missing:
            raise ModalityModelsMissing(f"untrained modality networks: {', '.join(missing)}")

    def modality_scores(self, fs: FeatureSet) -> dict:
        self._require_modalities()
        out = {}
        for j, m in enumerate(MODALITIES):
            s = self.modality_models[m].predict(fs.matrices[m]) if len(fs) else np.zeros((0, len(self.vocab)))
            out[m] = s * fs.present[:, j:j + 1]
        return out

    def ensemble_input(self, fs: FeatureSet) -> np.ndarray:
        return assemble_ensemble_input(self.modality_scores(fs), fs.present)

    def predict_scores(self, fs: FeatureSet) -> np.ndarray:
        if self.ensemble_model is None:
            raise SystemUntrained("ensemble network not trained")
        return self.ensemble_model.predict(self.ensemble_input(fs))

    def predict_confidence(self, fs: FeatureSet, scores: np.ndarray | None = None) -> np.ndarray:
        if self.confidence is None:
            raise SystemUntrained("confidence network not trained")
        if scores is None:
            scores = self.predict_scores(fs)
        return self.confidence.predict(fs.combined(), scores)

    def predict(self, fs: FeatureSet) -> list[PredictionBundle]:
        mod = self.modality_scores(fs)
        scores = self.ensemble_model.predict(assemble_ensemble_input(mod, fs.present)) \
            if self.ensemble_model is not None else None
        if scores is None:
            raise SystemUntrained("ensemble network not trained")
        conf = self.predict_confidence(fs, scores) if self.confidence is not None else None
        return [
            PredictionBundle(
                fs.episode_ids[i], {m: mod[m][i] for m in MODALITIES}, tuple(bool(b) for b in fs.present[i]),
                scores[i], None if conf is None else float(conf[i]))
            for i in range(len(fs))
        ]

    def predict_episode(self, episode: EpisodeRecord) -> PredictionBundle:
        return self.predict(self.space.transform([episode]))[0]


def predict_episode(system: EnsembleSystem, episode: EpisodeRecord) -> PredictionBundle:
    return system.predict_episode(episode)


def triage(bundles: Sequence[PredictionBundle], cutoff: float):
    """Split bundles into (accepted, delegated) by confidence >= cutoff."""
    if any(b.confidence is None for b in bundles):
        raise MissingConfidence("every bundle needs a confidence before triage")
    accepted = [b for b in bundles if b.confidence >= cutoff]
    delegated = [b for b in bundles if b.confidence < cutoff]
    return accepted, delegated


def train_modalities(system: EnsembleSystem, train_fs: FeatureSet, Y, dev_fs: FeatureSet, Y_dev,
                     only: Sequence[str] | None = None) -> None:
    for j, m in enumerate(MODALITIES):
        if only is not None and m not in only:
            continue
        model, hist = train_modality_net(m, train_fs.matrices[m], Y, train_fs.present[:, j],
                                         dev_fs.matrices[m], Y_dev, dev_fs.present[:, j], system.config)
        system.modality_models[m] = model
        system.history[m] = hist


def _augment(X_scores: dict, present: np.ndarray, Y: np.ndarray, config: ModelConfig, seed: int):
    """Original rows plus ``augment_copies`` copies with present modalities randomly masked."""
    rng = np.random.default_rng([seed, 0xA06])
    inputs = [assemble_ensemble_input(X_scores, present)]
    targets = [Y]
    for _ in range(config.augment_copies):
        drop = rng.random(present.shape) < config.mask_prob
        inputs.append(assemble_ensemble_input(X_scores, present & ~drop))
        targets.append(Y)
    return np.vstack(inputs), np.vstack(targets)


def train_ensemble(system: EnsembleSystem, train_fs: FeatureSet, Y, dev_fs: FeatureSet, Y_dev) -> MlpModel:
    """Fit the meta-network on frozen modality predictions (with simulated absence)."""
    system._require_modalities()
    n_labels = len(system.vocab)
    X, T = _augment(system.modality_scores(train_fs), train_fs.present, np.asarray(Y),
                    system.config, system.config.train.seed)
    width = system.config.ensemble_hidden or n_labels
    spec = NetworkSpec(len(MODALITIES) * n_labels + len(MODALITIES), (width,), n_labels,
                       (system.config.ensemble_dropout,), "sigmoid")
    tc = system.config.seeded("ensemble")
    model, hist = train(init_mlp(spec, tc.seed), X, T, system.ensemble_input(dev_fs), Y_dev, tc, "bce")
    system.ensemble_model = model
    system.history["ensemble"] = hist
    return model


def train_subset_ensemble(system: EnsembleSystem, keep: Sequence[str], train_fs: FeatureSet, Y,
                          dev_fs: FeatureSet, Y_dev) -> EnsembleSystem:
    """Copy of ``system`` whose ensemble is retrained seeing only the ``keep`` blocks."""
    sub = EnsembleSystem(system.vocab, system.space, system.config, dict(system.modality_models))
    train_ensemble(sub, mask_modalities(train_fs, keep), Y, mask_modalities(dev_fs, keep), Y_dev)
    return sub


def combined_baseline(train_fs: FeatureSet, Y, dev_fs: FeatureSet, Y_dev,
                      config: ModelConfig = ModelConfig()) -> tuple[MlpModel, dict]:
    """One network over all features stacked, sized like the largest modality net."""
    X = train_fs.combined()
    if len(X) == 0:
        raise EmptyDataset("empty training set")
    largest = max(MODALITIES, key=lambda m: (sum(config.hidden[m]), -MODALITIES.index(m)))
    hidden = config.hidden[largest]
    spec = _modality_spec(X.shape[1], np.asarray(Y).shape[1], hidden, config.dropout[largest])
    tc = config.seeded("combined")
    return train(init_mlp(spec, tc.seed), X, Y, dev_fs.combined(), Y_dev, tc, "bce")


def fit_system(space: FeatureSpace, vocab: CodeVocabulary, train_fs: FeatureSet, Y, dev_fs: FeatureSet, Y_dev,
               config: ModelConfig = ModelConfig()) -> EnsembleSystem:
    system = EnsembleSystem(vocab, space, config)
    train_modalities(system, train_fs, Y, dev_fs, Y_dev)
    train_ensemble(system, train_fs, Y, dev_fs, Y_dev)
    return system


def _fold_ids(n: int, k: int, seed: int) -> np.ndarray:
    order = np.random.default_rng([seed, 0xF01D]).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    return folds


def train_confidence(system: EnsembleSystem, train_fs: FeatureSet, Y, dev_fs: FeatureSet, Y_dev,
                     scopes: Sequence[float] = DEFAULT_SCOPES) -> ConfidenceModel:
    """Regress the ensemble's discrepancy from its scores (optionally plus all features).

    Training targets come from out-of-fold ensembles refit within the training
    split, so they measure generalization error rather than memorized fit.
    """
    if system.ensemble_model is None:
        raise SystemUntrained("train the ensemble before the confidence network")
    cfg = system.config
    Y = np.asarray(Y)
    k = cfg.confidence_folds
    oof = np.zeros(Y.shape)
    folds = _fold_ids(len(train_fs), k, cfg.train.seed)
    for f in range(k):
        inner, outer = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
        sub = fit_system(system.space, system.vocab, train_fs.subset(inner), Y[inner], dev_fs, Y_dev, cfg)
        oof[outer] = sub.predict_scores(train_fs.subset(outer))
        log.info("confidence fold %d/%d done", f + 1, k)
    X = confidence_input(train_fs.combined(), oof, cfg.confidence_inputs)
    T = discrepancy(oof, Y, cfg.threshold)[:, None]
    dev_scores = system.predict_scores(dev_fs)
    X_dev = confidence_input(dev_fs.combined(), dev_scores, cfg.confidence_inputs)
    T_dev = discrepancy(dev_scores, Y_dev, cfg.threshold)[:, None]
    hidden = cfg.confidence_hidden
    spec = NetworkSpec(X.shape[1], hidden, 1, (cfg.confidence_dropout,) * len(hidden), "identity")
    tc = cfg.seeded("confidence")
    regressor, hist = train(init_mlp(spec, tc.seed), X, T, X_dev, T_dev, tc, "mse")
    model = ConfidenceModel(regressor, inputs=cfg.confidence_inputs)
    dev_conf = model.predict(dev_fs.combined(), dev_scores)
    model.thresholds = {float(s): confidence_threshold(dev_conf, s) for s in scopes}
    system.confidence = model
    system.history["confidence"] = hist
    system.history["confidence_targets"] = {"train_mean": float(T.mean()), "dev_var": float(T_dev.var())}
    return model


# -- persistence -----------------------------------------------------------

def save_system(system: EnsembleSystem, directory: str | Path, config_hash: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    meta = {"config_hash": config_hash, "vocab_digest": system.vocab.digest()}
    for m, model in system.modality_models.items():
        save_model(model, d / f"{m}.nn", meta)
        files[m] = f"{m}.nn"
    if system.ensemble_model is not None:
        save_model(system.ensemble_model, d / "ensemble.nn", meta)
        files["ensemble"] = "ensemble.nn"
    if system.confidence is not None:
        save_model(system.confidence.regressor, d / "confidence.nn", meta)
        files["confidence"] = "confidence.nn"
    (d / "vocab.json").write_text(json.dumps(system.vocab.to_json(), sort_keys=True) + "\n")
    (d / "features.json").write_text(json.dumps(system.space.to_json(), sort_keys=True) + "\n")
    manifest = {
        "config_hash": config_hash,
        "vocab_digest": system.vocab.digest(),
        "feature_digest": system.space.digest(),
        "feature_dims": system.space.dims,
        "n_labels": len(system.vocab),
        "files": files,
        "thresholds": {repr(s): c for s, c in (system.confidence.thresholds.items() if system.confidence else [])},
        "model_config": system.config.to_dict(),
        "history": system.history,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_system(directory: str | Path) -> tuple[EnsembleSystem, dict]:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no system manifest at {path}")
    manifest = json.loads(path.read_text())
    vocab = CodeVocabulary.from_json(json.loads((d / "vocab.json").read_text()))
    space = FeatureSpace.from_json(json.loads((d / "features.json").read_text()))
    expected = manifest["feature_dims"]
    if space.dims != expected:
        raise ShapeMismatch(f"feature dims {space.dims} differ from manifest {expected}")
    system = EnsembleSystem(vocab, space, ModelConfig.from_dict(manifest["model_config"]),
                            history=manifest.get("history", {}))
    n = len(vocab)
    for name, fname in manifest["files"].items():
        model, _ = load_model(d / fname)
        want_in = {"ensemble": len(MODALITIES) * n + len(MODALITIES),
                   "confidence": n + (sum(expected.values()) if system.config.confidence_inputs == "features+scores"
                                      else 0)}.get(name, expected.get(name))
        want_out = 1 if name == "confidence" else n
        if (model.spec.input_dim, model.spec.output_dim) != (want_in, want_out):
            raise ShapeMismatch(f"{fname}: network maps {model.spec.input_dim}->{model.spec.output_dim}, "
                                f"manifest expects {want_in}->{want_out}")
        if name in MODALITIES:
            system.modality_models[name] = model
        elif name == "ensemble":
            system.ensemble_model = model
        else:
            system.confidence = ConfidenceModel(model, {float(k): v for k, v in manifest["thresholds"].items()},
                                                system.config.confidence_inputs)
    return system, manifest
