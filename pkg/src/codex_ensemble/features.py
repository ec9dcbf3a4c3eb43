"""Fixed-width feature vectors per modality, with normalization fitted on the training split."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import MODALITIES
from .data import EpisodeRecord
from .errors import CodexError, InvalidDates, NoNumericValues, SchemaViolation, ShapeMismatch
from .lexicons import Lexicons, default_lexicons
from .parsers import (
    DEFAULT_AGE_EDGES,
    N_SENTENCES,
    AdmissionFields,
    CleanedReport,
    LabMode,
    clean_radiology_text,
    normalize_medication,
    parse_admission,
    parse_lab_value,
)

_MATRIX_MAGIC = "CODEXMAT 1"


@dataclass(frozen=True)
class ModalityVector:
    modality: str
    values: np.ndarray
    present: bool


@dataclass(frozen=True)
class FeatureConfig:
    dim_per_sentence: int = 64
    hash_seed: int = 0
    age_edges: tuple[int, ...] = DEFAULT_AGE_EDGES

    def to_dict(self) -> dict:
        return {"dim_per_sentence": self.dim_per_sentence, "hash_seed": self.hash_seed,
                "age_edges": list(self.age_edges)}


@dataclass
class IngestReport:
    """Per-mode lab parse outcomes and other ingest failures, so dropped values are counted rather than hidden."""

    lab_modes: Counter = field(default_factory=Counter)
    lab_failures: Counter = field(default_factory=Counter)
    admission_failures: int = 0
    cancelled_prescriptions: int = 0
    episodes: int = 0

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "lab_modes": dict(sorted(self.lab_modes.items())),
            "lab_failures": dict(sorted(self.lab_failures.items())),
            "admission_failures": self.admission_failures,
            "cancelled_prescriptions": self.cancelled_prescriptions,
        }


# -- lab -------------------------------------------------------------------

@dataclass(frozen=True)
class LabAggregate:
    count: int
    min_value: float
    max_value: float


def summarize_labs(
    episode: EpisodeRecord, lexicons: Lexicons | None = None, report: IngestReport | None = None
) -> dict[str, LabAggregate]:
    """Per test: number of parsed results and the min/max value seen.

    Ranges feed both endpoints into min/max; categorical results enter through
    their ordinal score.  Unparseable values are dropped and counted.
    """
    lex = lexicons or default_lexicons()
    acc: dict[str, list] = {}
    for entry in episode.labs:
        try:
            v = parse_lab_value(entry.value, lex)
        except CodexError as exc:
            if report is not None:
                report.lab_failures[type(exc).__name__] += 1
            continue
        if report is not None:
            report.lab_modes[v.mode.value] += 1
        if v.mode is LabMode.CATEGORICAL:
            if v.category not in lex.category_scores:
                if report is not None:
                    report.lab_failures["UnscoredCategory"] += 1
                continue
            points = [lex.category_scores[v.category]]
        elif v.range is not None:
            points = list(v.range)
        else:
            points = [v.numeric_value]
        points = [max(0.0, p) for p in points]
        slot = acc.setdefault(entry.test_id, [0, math.inf, -math.inf])
        slot[0] += 1
        slot[1] = min(slot[1], *points)
        slot[2] = max(slot[2], *points)
    return {t: LabAggregate(c, lo, hi) for t, (c, lo, hi) in acc.items()}


@dataclass(frozen=True)
class LabNormStats:
    log_min: dict[str, float]
    log_max: dict[str, float]
    max_count: dict[str, int]
    fitted_on: str = "train"

    @property
    def tests(self) -> tuple[str, ...]:
        return tuple(sorted(self.log_min))

    def to_json(self) -> dict:
        return {"log_min": self.log_min, "log_max": self.log_max,
                "max_count": self.max_count, "fitted_on": self.fitted_on}

    @classmethod
    def from_json(cls, obj: dict) -> "LabNormStats":
        return cls(dict(obj["log_min"]), dict(obj["log_max"]), dict(obj["max_count"]), obj["fitted_on"])


def fit_lab_stats(summaries: Iterable[dict[str, LabAggregate]], fitted_on: str = "train") -> LabNormStats:
    """log1p min/max and the largest count per test, over one split's summaries."""
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    cnt: dict[str, int] = {}
    for summary in summaries:
        for test, agg in summary.items():
            a, b = math.log1p(agg.min_value), math.log1p(agg.max_value)
            lo[test] = min(lo.get(test, math.inf), a)
            hi[test] = max(hi.get(test, -math.inf), b)
            cnt[test] = max(cnt.get(test, 0), agg.count)
    if not lo:
        raise NoNumericValues("no parsed lab value to fit normalization on")
    return LabNormStats(lo, hi, cnt, fitted_on)


def _scale(x: float, lo: float, hi: float) -> float:
    if hi > lo:
        return min(1.0, max(0.0, (x - lo) / (hi - lo)))
    return 0.0 if x <= lo else 1.0


def encode_lab(summary: dict[str, LabAggregate], stats: LabNormStats, present: Optional[bool] = None) -> ModalityVector:
    """(count, min, max) per test in the fitted universe, each scaled into [0, 1]."""
    tests = stats.tests
    values = np.zeros(3 * len(tests))
    for i, test in enumerate(tests):
        agg = summary.get(test)
        if agg is None:
            continue
        values[3 * i] = min(1.0, math.log1p(agg.count) / math.log1p(max(stats.max_count[test], 1)))
        values[3 * i + 1] = _scale(math.log1p(agg.min_value), stats.log_min[test], stats.log_max[test])
        values[3 * i + 2] = _scale(math.log1p(agg.max_value), stats.log_min[test], stats.log_max[test])
    is_present = bool(summary) if present is None else present
    if not is_present:
        values[:] = 0.0
    return ModalityVector("lab", values, is_present)


# -- radiology -------------------------------------------------------------

def hash_token(token: str, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
    h = int.from_bytes(digest, "little")
    return h >> 1, (1.0 if h & 1 else -1.0)


def embed_sentence(tokens: Sequence[str], dim: int, seed: int) -> np.ndarray:
    vec = np.zeros(dim)
    for tok in tokens:
        idx, sign = hash_token(tok, seed)
        vec[idx % dim] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def radiology_dim(dim_per_sentence: int, lexicons: Lexicons | None = None) -> int:
    lex = lexicons or default_lexicons()
    return N_SENTENCES * dim_per_sentence + len(lex.locations) + len(lex.positions)


def embed_report(report: CleanedReport, dim_per_sentence: int, seed: int, lexicons: Lexicons | None = None) -> ModalityVector:
    """Signed feature hashing per sentence slot, then location and position one-hots."""
    if dim_per_sentence < 1:
        raise ValueError("dim_per_sentence must be >= 1")
    lex = lexicons or default_lexicons()
    parts = [embed_sentence(s, dim_per_sentence, seed) for s in report.sentences]
    loc = np.array([1.0 if t in report.location_tags else 0.0 for t in lex.locations])
    pos = np.array([1.0 if t in report.position_tags else 0.0 for t in lex.positions])
    return ModalityVector("radiology", np.concatenate(parts + [loc, pos]), not report.is_empty)


def encode_radiology(episode: EpisodeRecord, config: FeatureConfig, lexicons: Lexicons | None = None) -> ModalityVector:
    """Mean of per-report embeddings; exam location/position fields add to the tags."""
    lex = lexicons or default_lexicons()
    dim = radiology_dim(config.dim_per_sentence, lex)
    if not episode.radiology:
        return ModalityVector("radiology", np.zeros(dim), False)
    vecs = []
    for rep in episode.radiology:
        cleaned = clean_radiology_text(rep.text, lexicons=lex)
        extra_loc = {(rep.location or "").strip().lower()} & set(lex.locations)
        extra_pos = {(rep.position or "").strip().lower()} & set(lex.positions)
        cleaned = CleanedReport(cleaned.sentences, cleaned.location_tags | extra_loc,
                                cleaned.position_tags | extra_pos)
        vecs.append(embed_report(cleaned, config.dim_per_sentence, config.hash_seed, lex).values)
    return ModalityVector("radiology", np.mean(vecs, axis=0), True)


# -- medications -----------------------------------------------------------

def active_drugs(episode: EpisodeRecord, lexicons: Lexicons | None = None, report: IngestReport | None = None) -> set[str]:
    out = set()
    for entry in episode.medications:
        code = normalize_medication(entry.drug_code, entry.status, lexicons)
        if code is None:
            if report is not None:
                report.cancelled_prescriptions += 1
            continue
        out.add(code)
    return out


def encode_medications(drugs: set[str], vocab: Sequence[str], present: Optional[bool] = None) -> ModalityVector:
    index = {d: i for i, d in enumerate(vocab)}
    values = np.zeros(len(vocab))
    for d in drugs:
        if d in index:
            values[index[d]] = 1.0
    return ModalityVector("medications", values, bool(drugs) if present is None else present)


# -- admission -------------------------------------------------------------

@dataclass(frozen=True)
class AdmissionStats:
    max_log_los: float
    year_min: int
    year_max: int
    n_age_bins: int

    def to_json(self) -> dict:
        return {"max_log_los": self.max_log_los, "year_min": self.year_min,
                "year_max": self.year_max, "n_age_bins": self.n_age_bins}


def admission_dim(n_age_bins: int) -> int:
    return 1 + n_age_bins + 1 + 4 + 1


def _cyclic01(value: int, period: int) -> tuple[float, float]:
    angle = 2.0 * math.pi * (value - 1) / period
    return (math.sin(angle) + 1.0) / 2.0, (math.cos(angle) + 1.0) / 2.0


def encode_admission(fields: Optional[AdmissionFields], stats: AdmissionStats) -> ModalityVector:
    """gender | age-group one-hot | scaled log stay | day, month on the unit circle | year."""
    values = np.zeros(admission_dim(stats.n_age_bins))
    if fields is None:
        return ModalityVector("admission", values, False)
    values[0] = float(fields.gender)
    values[1 + min(fields.age_bin, stats.n_age_bins - 1)] = 1.0
    k = 1 + stats.n_age_bins
    values[k] = min(1.0, math.log1p(fields.length_of_stay_days) / stats.max_log_los) if stats.max_log_los > 0 else 0.0
    values[k + 1:k + 3] = _cyclic01(fields.admit_day, 31)
    values[k + 3:k + 5] = _cyclic01(fields.admit_month, 12)
    values[k + 5] = _scale(fields.admit_year, stats.year_min, stats.year_max)
    return ModalityVector("admission", values, True)


def admission_fields(episode: EpisodeRecord, config: FeatureConfig, report: IngestReport | None = None) -> Optional[AdmissionFields]:
    raw = episode.admission
    if raw is None:
        return None
    try:
        discharge = dt.date.fromisoformat(raw.discharge_date) if raw.discharge_date else None
        return parse_admission(raw.gender, dt.date.fromisoformat(raw.birth_date),
                               dt.date.fromisoformat(raw.admit_date), discharge, config.age_edges)
    except (CodexError, ValueError):
        if report is not None:
            report.admission_failures += 1
        return None


# -- whole feature space ---------------------------------------------------

@dataclass
class FeatureSet:
    matrices: dict[str, np.ndarray]
    present: np.ndarray  # (n, 4) bool in MODALITIES order
    episode_ids: list[str]

    def __len__(self) -> int:
        return len(self.episode_ids)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet({m: x[idx] for m, x in self.matrices.items()}, self.present[idx],
                          [self.episode_ids[i] for i in idx])

    def combined(self) -> np.ndarray:
        return np.hstack([self.matrices[m] for m in MODALITIES])


@dataclass
class FeatureSpace:
    config: FeatureConfig
    lab_stats: LabNormStats
    drug_vocab: tuple[str, ...]
    admission_stats: AdmissionStats
    lexicons: Lexicons = field(default_factory=default_lexicons, repr=False)

    @classmethod
    def fit(cls, train: Sequence[EpisodeRecord], config: FeatureConfig = FeatureConfig(),
            lexicons: Lexicons | None = None) -> "FeatureSpace":
        lex = lexicons or default_lexicons()
        lab_stats = fit_lab_stats((summarize_labs(ep, lex) for ep in train), fitted_on="train")
        drugs = sorted(set().union(*(active_drugs(ep, lex) for ep in train)))
        adm = [f for f in (admission_fields(ep, config) for ep in train) if f is not None]
        n_bins = len(config.age_edges) + 1
        if adm:
            stats = AdmissionStats(max(math.log1p(f.length_of_stay_days) for f in adm),
                                   min(f.admit_year for f in adm), max(f.admit_year for f in adm), n_bins)
        else:
            stats = AdmissionStats(0.0, 0, 0, n_bins)
        return cls(config, lab_stats, tuple(drugs), stats, lex)

    @property
    def dims(self) -> dict[str, int]:
        return {
            "lab": 3 * len(self.lab_stats.tests),
            "medications": len(self.drug_vocab),
            "radiology": radiology_dim(self.config.dim_per_sentence, self.lexicons),
            "admission": admission_dim(self.admission_stats.n_age_bins),
        }

    def encode_episode(self, ep: EpisodeRecord, report: IngestReport | None = None) -> dict[str, ModalityVector]:
        lex = self.lexicons
        return {
            "lab": encode_lab(summarize_labs(ep, lex, report), self.lab_stats, present=bool(ep.labs)),
            "medications": encode_medications(active_drugs(ep, lex, report), self.drug_vocab,
                                              present=bool(ep.medications)),
            "radiology": encode_radiology(ep, self.config, lex),
            "admission": encode_admission(admission_fields(ep, self.config, report), self.admission_stats),
        }

    def transform(self, episodes: Sequence[EpisodeRecord], report: IngestReport | None = None) -> FeatureSet:
        dims = self.dims
        mats = {m: np.zeros((len(episodes), dims[m])) for m in MODALITIES}
        present = np.zeros((len(episodes), len(MODALITIES)), dtype=bool)
        for i, ep in enumerate(episodes):
            if report is not None:
                report.episodes += 1
            for j, (m, vec) in enumerate(self.encode_episode(ep, report).items()):
                mats[m][i] = vec.values
                present[i, j] = vec.present
        return FeatureSet(mats, present, [ep.episode_id for ep in episodes])

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "lab_stats": self.lab_stats.to_json(),
            "drug_vocab": list(self.drug_vocab),
            "admission_stats": self.admission_stats.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict, lexicons: Lexicons | None = None) -> "FeatureSpace":
        cfg = obj["config"]
        return cls(
            FeatureConfig(cfg["dim_per_sentence"], cfg["hash_seed"], tuple(cfg["age_edges"])),
            LabNormStats.from_json(obj["lab_stats"]),
            tuple(obj["drug_vocab"]),
            AdmissionStats(**obj["admission_stats"]),
            lexicons or default_lexicons(),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# -- matrix dump -----------------------------------------------------------

def write_matrix(path: str | Path, matrix: np.ndarray, name: str, config_hash: str) -> None:
    """Text header (rows, cols, name, config hash) then little-endian float64 rows."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ShapeMismatch("matrix dump needs a 2-d array")
    header = (f"{_MATRIX_MAGIC}\nname={name}\nn_rows={m.shape[0]}\nn_cols={m.shape[1]}\n"
              f"config_hash={config_hash}\ndtype=<f8\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(m.tobytes())


def read_matrix(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    lines = head.decode("utf-8").split("\n")
    if not sep or lines[0] != _MATRIX_MAGIC:
        raise SchemaViolation(f"{path}: not a feature matrix file")
    meta = dict(line.split("=", 1) for line in lines[1:])
    rows, cols = int(meta["n_rows"]), int(meta["n_cols"])
    m = np.frombuffer(body, dtype="<f8", count=rows * cols).reshape(rows, cols).astype(np.float64)
    return m, meta
