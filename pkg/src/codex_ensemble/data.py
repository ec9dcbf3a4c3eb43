"""Episode corpus, ICD10 category vocabulary, label vectors and stratified splitting."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import jsonschema
import numpy as np

from .errors import (
    BadRatios,
    EmptyDataset,
    EmptyVocabulary,
    MalformedCode,
    NoRetainedLabels,
    SchemaViolation,
)

SPLITS = ("train", "dev", "test")
MIN_STRATUM = 10
OVERFLOW_KEY = "~overflow"


@dataclass(frozen=True)
class LabEntry:
    test_id: str
    value: str
    timestamp: Optional[str] = None


@dataclass(frozen=True)
class MedicationEntry:
    drug_code: str
    status: str


@dataclass(frozen=True)
class RadiologyEntry:
    text: str
    location: Optional[str] = None
    position: Optional[str] = None


@dataclass(frozen=True)
class AdmissionRaw:
    gender: str
    birth_date: str
    admit_date: str
    discharge_date: Optional[str] = None


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: str
    patient_kind: str
    labs: tuple[LabEntry, ...] = ()
    medications: tuple[MedicationEntry, ...] = ()
    radiology: tuple[RadiologyEntry, ...] = ()
    admission: Optional[AdmissionRaw] = None
    codes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def principal_code(self) -> str:
        return self.codes[0]

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "patient_kind": self.patient_kind,
            "labs": [asdict(e) for e in self.labs],
            "medications": [asdict(e) for e in self.medications],
            "radiology": [asdict(e) for e in self.radiology],
            "admission": asdict(self.admission) if self.admission is not None else None,
            "codes": list(self.codes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EpisodeRecord":
        adm = obj.get("admission")
        return cls(
            episode_id=obj["episode_id"],
            patient_kind=obj["patient_kind"],
            labs=tuple(LabEntry(**e) for e in obj.get("labs", [])),
            medications=tuple(MedicationEntry(**e) for e in obj.get("medications", [])),
            radiology=tuple(RadiologyEntry(**e) for e in obj.get("radiology", [])),
            admission=AdmissionRaw(**adm) if adm else None,
            codes=tuple(obj["codes"]),
        )


def corpus_schema() -> dict:
    text = resources.files("codex_ensemble.schema").joinpath("corpus.schema.json").read_text()
    return json.loads(text)


def write_corpus(path: str | Path, episodes: Iterable[EpisodeRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_corpus(path: str | Path, validate: bool = True) -> list[EpisodeRecord]:
    validator = jsonschema.Draft202012Validator(corpus_schema()) if validate else None
    episodes, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if validator is not None:
                err = jsonschema.exceptions.best_match(validator.iter_errors(obj))
                if err is not None:
                    raise SchemaViolation(f"{path}:{lineno}: {err.message}")
            ep = EpisodeRecord.from_json(obj)
            if ep.episode_id in seen:
                raise SchemaViolation(f"{path}:{lineno}: duplicate episode_id {ep.episode_id!r}")
            seen.add(ep.episode_id)
            episodes.append(ep)
    return episodes


_CODE = re.compile(r"^[A-Z][0-9]{2}")


def truncate_code(code: str) -> str:
    """ICD10 category: the first three characters, uppercased."""
    c = (code or "").strip().upper()
    if not _CODE.match(c):
        raise MalformedCode(f"not an ICD10 code: {code!r}")
    return c[:3]


def episode_categories(episode: EpisodeRecord) -> list[str]:
    """Distinct categories in code order; malformed codes are skipped."""
    out: list[str] = []
    for code in episode.codes:
        try:
            cat = truncate_code(code)
        except MalformedCode:
            continue
        if cat not in out:
            out.append(cat)
    return out


@dataclass(frozen=True)
class CodeVocabulary:
    categories: tuple[str, ...]
    counts: dict[str, int]
    min_support: int = 3

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.categories)})

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, category: str) -> bool:
        return category in self._index

    def to_json(self) -> dict:
        return {
            "categories": list(self.categories),
            "counts": {c: self.counts[c] for c in self.categories},
            "min_support": self.min_support,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CodeVocabulary":
        return cls(tuple(obj["categories"]), dict(obj["counts"]), obj.get("min_support", 3))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_code_vocab(episodes: Sequence[EpisodeRecord], min_support: int = 3) -> CodeVocabulary:
    """Count categories (once per episode) and keep those seen at least ``min_support`` times."""
    if not episodes:
        raise EmptyDataset("no episodes")
    counts: Counter[str] = Counter()
    for ep in episodes:
        counts.update(episode_categories(ep))
    kept = sorted(c for c, n in counts.items() if n >= min_support)
    if not kept:
        raise EmptyVocabulary(f"no category reaches min_support={min_support}")
    return CodeVocabulary(tuple(kept), {c: counts[c] for c in kept}, min_support)


def apply_vocab(
    episodes: Sequence[EpisodeRecord], vocab: CodeVocabulary
) -> tuple[list[EpisodeRecord], list[str]]:
    """Split episodes into those keeping at least one category and ids of the dropped rest."""
    kept, dropped = [], []
    for ep in episodes:
        if any(c in vocab for c in episode_categories(ep)):
            kept.append(ep)
        else:
            dropped.append(ep.episode_id)
    return kept, dropped


@dataclass(frozen=True)
class LabelVector:
    bits: np.ndarray
    principal_index: int


def label_vector(episode: EpisodeRecord, vocab: CodeVocabulary) -> LabelVector:
    """Multi-hot labels; a filtered principal hands over to the first surviving code."""
    cats = [c for c in episode_categories(episode) if c in vocab]
    if not cats:
        raise NoRetainedLabels(f"episode {episode.episode_id} has no retained category")
    bits = np.zeros(len(vocab), dtype=np.uint8)
    for c in cats:
        bits[vocab.index[c]] = 1
    return LabelVector(bits, vocab.index[cats[0]])


def principal_category(episode: EpisodeRecord, vocab: CodeVocabulary) -> str:
    return vocab.categories[label_vector(episode, vocab).principal_index]


def label_matrix(
    episodes: Sequence[EpisodeRecord], vocab: CodeVocabulary
) -> tuple[np.ndarray, np.ndarray]:
    Y = np.zeros((len(episodes), len(vocab)), dtype=np.uint8)
    principal = np.zeros(len(episodes), dtype=np.int64)
    for i, ep in enumerate(episodes):
        lv = label_vector(ep, vocab)
        Y[i] = lv.bits
        principal[i] = lv.principal_index
    return Y, principal


def _largest_remainder(n: int, ratios: Sequence[Fraction]) -> list[int]:
    quotas = [r * n for r in ratios]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_split(
    episodes: Sequence[EpisodeRecord],
    ratios: Sequence[float] = (0.70, 0.10, 0.20),
    seed: int = 0,
    keys: Optional[Sequence[str]] = None,
) -> tuple[list[EpisodeRecord], list[EpisodeRecord], list[EpisodeRecord]]:
    """Seeded train/dev/test partition stratified on ``keys`` (default: principal category).

    Strata with fewer than 10 members are pooled into one overflow stratum.
    Each stratum is shuffled and cut with largest-remainder rounding.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise BadRatios(f"need three non-negative ratios, got {ratios}")
    fracs = [Fraction(str(r)) for r in ratios]
    if sum(fracs) != 1:
        raise BadRatios(f"ratios must sum to 1, got {ratios}")
    if len(episodes) < MIN_STRATUM:
        raise EmptyDataset(f"need at least {MIN_STRATUM} episodes, got {len(episodes)}")
    if keys is None:
        keys = [truncate_code(ep.principal_code) for ep in episodes]
    groups: dict[str, list[int]] = defaultdict(list)
    for i, k in enumerate(keys):
        groups[k].append(i)
    strata: dict[str, list[int]] = {}
    overflow: list[int] = []
    for k in sorted(groups):
        if len(groups[k]) < MIN_STRATUM:
            overflow.extend(groups[k])
        else:
            strata[k] = groups[k]
    if overflow:
        strata[OVERFLOW_KEY] = sorted(overflow)

    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for k in strata:
        members = strata[k]
        shuffled = [members[j] for j in rng.permutation(len(members))]
        start = 0
        for p, size in enumerate(_largest_remainder(len(members), fracs)):
            parts[p].extend(shuffled[start:start + size])
            start += size
    return tuple([episodes[i] for i in sorted(part)] for part in parts)


def write_manifest(path: str | Path, train, dev, test) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, part in zip(SPLITS, (train, dev, test)):
            for ep in part:
                fh.write(f"{ep.episode_id}\t{name}\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                eid, name = line.rstrip("\n").split("\t")
                if name not in SPLITS:
                    raise SchemaViolation(f"bad split name {name!r} in {path}")
                out[eid] = name
    return out
