"""Synthetic episode corpora with planted, quantifiable modality-to-code signal.

Generative model (factorized so the exact posterior is cheap):

* principal category ~ Zipf-like prior; every other category joins the label
  set independently with its own probability, tuned to hit ``mean_codes``;
* each category owns disjoint evidence: a few drugs, a few lab tests and a few
  radiology words.  Evidence is emitted at a background rate when the
  category is absent, at a higher rate when it is a secondary label and at
  the highest rate when it is the principal;
* each category has a "home" modality carrying the configured signal
  strength; the other modalities carry ``cross_strength`` times that;
* whole modalities are then dropped with per-modality probabilities.

Admission fields are generated for realism but carry no label signal.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import MODALITIES
from .data import (
    AdmissionRaw,
    CodeVocabulary,
    EpisodeRecord,
    LabEntry,
    MedicationEntry,
    RadiologyEntry,
    episode_categories,
    truncate_code,
)
from .errors import CodexError, SpecInvalid
from .features import active_drugs
from .lexicons import default_lexicons
from .metrics import EvalReport, evaluate
from .parsers import LabMode, clean_radiology_text, parse_lab_value

SIGNAL_MODALITIES = ("lab", "medications", "radiology")

_BASE_RATE = {"medications": 0.05, "lab": 0.2, "radiology": 0.05}
_NUMERIC_SHIFT = 2.5  # principal log-value shift, in sigma units, at strength 1
_QUAL_SHIFT = 3.0
_QUAL_OFFSET = -1.0
_Q_CAP = 0.8
_LETTERS = "ABCDEFGHIJKLMNOPQRSTVWXYZ"
_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
_GARBAGE = ["see note", "hemolysed", "###", "pending", "qns", "clotted"]
_POS_FORMS = ["pos", "+ve", "positive", "POS", "Positive"]
_NEG_FORMS = ["neg", "-ve", "negative", "NEG", "nil"]
_UNITS = ["mg/dl", "mmol/l", "iu/ml", "u/l", "g/l", "umol/l"]
_ACTIVE = ["active", "dispensed", "Given", "ACTIVE"]
_CANCELLED = ["cancelled", "CANCELED", "void"]


@dataclass(frozen=True)
class GeneratorSpec:
    n_episodes: int = 5000
    n_categories: int = 50
    mean_codes: float = 3.43
    patient_kind: str = "inpatient"
    signal: dict = field(default_factory=lambda: {"lab": 0.8, "medications": 0.8, "radiology": 0.8})
    dropout: dict = field(default_factory=lambda: {"lab": 0.2, "medications": 0.15, "radiology": 0.4, "admission": 0.0})
    cross_strength: float = 0.2
    secondary_scale: float = 0.6
    prior_exponent: float = 0.8
    drugs_per_category: int = 3
    tests_per_category: int = 2
    tokens_per_category: int = 3
    n_noise_drugs: int = 60
    n_noise_tests: int = 8
    n_noise_tokens: int = 80
    seed: int = 0

    def validate(self) -> None:
        if self.n_episodes < 1 or self.n_categories < 2:
            raise SpecInvalid("need n_episodes >= 1 and n_categories >= 2")
        if self.mean_codes < 1:
            raise SpecInvalid("mean_codes must be >= 1")
        if self.mean_codes - 1 > _Q_CAP * (self.n_categories - 1):
            raise SpecInvalid(f"mean_codes {self.mean_codes} unreachable with {self.n_categories} categories")
        if self.patient_kind not in ("inpatient", "outpatient"):
            raise SpecInvalid(f"bad patient_kind {self.patient_kind!r}")
        for name in SIGNAL_MODALITIES:
            if name not in self.signal:
                raise SpecInvalid(f"missing signal strength for {name}")
        for name, p in [*self.signal.items(), *self.dropout.items(),
                        ("cross_strength", self.cross_strength), ("secondary_scale", self.secondary_scale)]:
            if not 0.0 <= p <= 1.0:
                raise SpecInvalid(f"{name}={p} outside [0, 1]")
        if set(self.signal) - set(SIGNAL_MODALITIES) or set(self.dropout) - set(MODALITIES):
            raise SpecInvalid("unknown modality in signal/dropout")
        if min(self.drugs_per_category, self.tests_per_category, self.tokens_per_category) < 1:
            raise SpecInvalid("each category needs at least one item per modality")

    def to_dict(self) -> dict:
        return asdict(self)


# -- generative tables -----------------------------------------------------

def _rates(base: float, strength: float, secondary_scale: float) -> tuple[float, float, float]:
    """(absent, secondary, principal) emission probabilities."""
    absent = base * (1.0 - strength)
    principal = base + strength * (1.0 - base)
    return absent, absent + secondary_scale * (principal - absent), principal


def _secondary_probs(prior: np.ndarray, extra: float) -> np.ndarray:
    if extra <= 0:
        return np.zeros_like(prior)
    weights = np.sqrt(prior)

    def expected(k):
        q = np.minimum(_Q_CAP, k * weights)
        return float(np.sum(prior * (q.sum() - q)))

    lo, hi = 0.0, 1.0
    while expected(hi) < extra:
        hi *= 2
    for _ in range(100):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if expected(mid) < extra else (lo, mid)
    return np.minimum(_Q_CAP, hi * weights)


def _pseudo_words(rng, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(3, 5)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def build_tables(spec: GeneratorSpec) -> dict:
    """Category codes, priors and per-category evidence; depends on the seed only through ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x7AB1E5])
    C = spec.n_categories
    pool = [f"{l}{n:02d}" for l in _LETTERS for n in range(100)]
    categories = sorted(rng.choice(pool, size=C, replace=False).tolist())
    ranks = rng.permutation(C) + 1
    prior = ranks.astype(float) ** -spec.prior_exponent
    prior /= prior.sum()
    secondary = _secondary_probs(prior, spec.mean_codes - 1.0)
    home = [SIGNAL_MODALITIES[i % 3] for i in rng.permutation(C)]

    lex = default_lexicons()
    taken = set(lex.stopwords) | set(lex.locations) | set(lex.positions)
    drugs = [[f"RX{c * spec.drugs_per_category + k + 1:04d}" for k in range(spec.drugs_per_category)]
             for c in range(C)]
    noise_drugs = [f"RX{9000 + k:04d}" for k in range(spec.n_noise_drugs)]
    tokens = [_pseudo_words(rng, spec.tokens_per_category, taken) for _ in range(C)]
    noise_tokens = _pseudo_words(rng, spec.n_noise_tokens, taken)

    def strength(c, modality):
        s = spec.signal[modality]
        return s if home[c] == modality else s * spec.cross_strength

    tests = []
    for c in range(C):
        row = []
        for k in range(spec.tests_per_category):
            kind = ["numeric", "numeric", "binary", "grade"][rng.integers(0, 4)]
            row.append({
                "test_id": f"L{c * spec.tests_per_category + k + 1:04d}",
                "kind": kind,
                "mu": float(rng.uniform(1.5, 5.0)),
                "sigma": float(rng.uniform(0.2, 0.5)),
                "unit": _UNITS[rng.integers(0, len(_UNITS))],
            })
        tests.append(row)
    noise_tests = [{"test_id": f"L9{k:03d}", "mu": float(rng.uniform(1.5, 5.0)),
                    "sigma": float(rng.uniform(0.2, 0.5))} for k in range(spec.n_noise_tests)]

    emission = []
    for c in range(C):
        s = {m: strength(c, m) for m in SIGNAL_MODALITIES}
        emission.append({
            "strength": s,
            "drug_rates": _rates(_BASE_RATE["medications"], s["medications"], spec.secondary_scale),
            "test_rates": _rates(_BASE_RATE["lab"], s["lab"], spec.secondary_scale),
            "token_rates": _rates(_BASE_RATE["radiology"], s["radiology"], spec.secondary_scale),
            "numeric_shift": (0.0, _NUMERIC_SHIFT * s["lab"] * spec.secondary_scale, _NUMERIC_SHIFT * s["lab"]),
            "qual_shift": (0.0, _QUAL_SHIFT * s["lab"] * spec.secondary_scale, _QUAL_SHIFT * s["lab"]),
        })

    return {
        "spec": spec.to_dict(),
        "categories": categories,
        "prior": prior.tolist(),
        "secondary": secondary.tolist(),
        "home": home,
        "drugs": drugs,
        "noise_drugs": noise_drugs,
        "tests": tests,
        "noise_tests": noise_tests,
        "tokens": tokens,
        "noise_tokens": noise_tokens,
        "emission": emission,
        "qual_offset": _QUAL_OFFSET,
    }


# -- emission --------------------------------------------------------------

def _render_number(rng, value: float, unit: str) -> str:
    r = rng.random()
    if r < 0.55:
        return f"{value:.2f}"
    if r < 0.75:
        u = unit.upper() if rng.random() < 0.3 else unit
        return f"{value:.2f} {u}"
    if r < 0.87:
        return f"range {value * 0.9:.2f}-{value * 1.1:.2f}"
    return f"{value:.2f}{rng.choice(['!!', '##', '..', ' *'])}"


def _render_qual(rng, kind: str, latent: float) -> str:
    if kind == "binary":
        forms = _POS_FORMS if latent > 0 else _NEG_FORMS
        return forms[rng.integers(0, len(forms))]
    if latent <= 0:
        return _NEG_FORMS[rng.integers(0, len(_NEG_FORMS))]
    return f"{min(3, int(math.ceil(latent)))}+"


def _messy_code(rng, code: str) -> str:
    r = rng.random()
    if r < 0.2:
        return f"  {code.lower()} "
    if r < 0.3:
        return code.lower()
    return code


def _role(c: int, labels: list[int]) -> int:
    """0 absent, 1 secondary, 2 principal."""
    if labels[0] == c:
        return 2
    return 1 if c in labels else 0


def _date(rng, start: dt.date, end: dt.date) -> dt.date:
    return start + dt.timedelta(days=int(rng.integers(0, (end - start).days + 1)))


def generate_episode(spec: GeneratorSpec, tables: dict, index: int) -> EpisodeRecord:
    rng = np.random.default_rng([spec.seed, index])
    C = spec.n_categories
    prior = np.asarray(tables["prior"])
    principal = int(rng.choice(C, p=prior))
    secondary = [c for c in range(C) if c != principal and rng.random() < tables["secondary"][c]]
    rng.shuffle(secondary)
    labels = [principal, *secondary]
    cats = tables["categories"]
    codes = []
    for c in labels:
        style = rng.random()
        digit = int(rng.integers(0, 10))
        codes.append(cats[c] if style < 0.2 else f"{cats[c]}{digit}" if style < 0.3 else f"{cats[c]}.{digit}")

    dropped = {m: rng.random() < spec.dropout.get(m, 0.0) for m in MODALITIES}
    role = [_role(c, labels) for c in range(C)]

    # medications
    meds: list[MedicationEntry] = []
    if not dropped["medications"]:
        meds.append(MedicationEntry(_messy_code(rng, "RX0000"), "active"))
        for c in range(C):
            rate = tables["emission"][c]["drug_rates"][role[c]]
            for d in tables["drugs"][c]:
                if rng.random() < rate:
                    meds.append(MedicationEntry(_messy_code(rng, d), _ACTIVE[rng.integers(0, 4)]))
        for d in tables["noise_drugs"]:
            if rng.random() < 0.05:
                meds.append(MedicationEntry(_messy_code(rng, d), _ACTIVE[rng.integers(0, 4)]))
        everything = tables["noise_drugs"] + [d for row in tables["drugs"] for d in row]
        for _ in range(rng.poisson(0.4)):
            d = everything[rng.integers(0, len(everything))]
            meds.append(MedicationEntry(_messy_code(rng, d), _CANCELLED[rng.integers(0, 3)]))
        order = rng.permutation(len(meds))
        meds = [meds[i] for i in order]

    admit = _date(rng, dt.date(2006, 1, 1), dt.date(2019, 12, 31))
    stamp = lambda h: f"{admit.isoformat()}T{int(h) % 24:02d}:00:00"

    # labs
    labs: list[LabEntry] = []
    if not dropped["lab"]:
        labs.append(LabEntry("L0000", f"{float(np.exp(rng.normal(3.0, 0.3))):.2f}", stamp(6)))
        for c in range(C):
            em = tables["emission"][c]
            for t in tables["tests"][c]:
                if rng.random() >= em["test_rates"][role[c]]:
                    continue
                for _ in range(1 + rng.binomial(2, 0.4)):
                    if t["kind"] == "numeric":
                        z = rng.normal() + em["numeric_shift"][role[c]]
                        raw = _render_number(rng, math.exp(t["mu"] + t["sigma"] * z), t["unit"])
                    else:
                        latent = rng.normal() + em["qual_shift"][role[c]] + tables["qual_offset"]
                        raw = _render_qual(rng, t["kind"], latent)
                    labs.append(LabEntry(t["test_id"], raw, stamp(rng.integers(0, 24))))
        for t in tables["noise_tests"]:
            if rng.random() < 0.3:
                if rng.random() < 0.05:
                    raw = _GARBAGE[rng.integers(0, len(_GARBAGE))]
                else:
                    raw = _render_number(rng, math.exp(t["mu"] + t["sigma"] * rng.normal()), "mg/dl")
                labs.append(LabEntry(t["test_id"], raw, stamp(rng.integers(0, 24))))

    # radiology
    rad: list[RadiologyEntry] = []
    if not dropped["radiology"]:
        words = []
        for c in range(C):
            rate = tables["emission"][c]["token_rates"][role[c]]
            words += [w for w in tables["tokens"][c] if rng.random() < rate]
        noise = tables["noise_tokens"]
        words += [noise[rng.integers(0, len(noise))] for _ in range(1 + rng.poisson(6))]
        rad.append(_render_report(rng, words))

    # admission
    admission = None
    if not dropped["admission"]:
        birth = admit - dt.timedelta(days=int(rng.integers(0, 90 * 365)))
        discharge = None
        if spec.patient_kind == "inpatient":
            discharge = admit + dt.timedelta(days=int(rng.geometric(0.25) - 1))
        gender = ["F", "M", "female", "male", "Female", "Male"][rng.integers(0, 6)]
        admission = AdmissionRaw(gender, birth.isoformat(), admit.isoformat(),
                                 discharge.isoformat() if discharge else None)

    return EpisodeRecord(
        episode_id=f"EP{spec.seed:04d}-{index:06d}",
        patient_kind=spec.patient_kind,
        labs=tuple(labs),
        medications=tuple(meds),
        radiology=tuple(rad),
        admission=admission,
        codes=tuple(codes),
    )


_FILLER = ["the", "is", "no", "with", "of", "and", "there", "are", "in", "seen"]


def _render_report(rng, words: list[str]) -> RadiologyEntry:
    lex = default_lexicons()
    location = lex.locations[rng.integers(0, len(lex.locations))]
    position = lex.positions[rng.integers(0, len(lex.positions))]
    words = [words[i] for i in rng.permutation(len(words))]
    n_sent = int(rng.integers(2, 6))
    chunks = [list(c) for c in np.array_split(np.array(words, dtype=object), n_sent)]
    sentences = []
    for k, chunk in enumerate(chunks):
        toks = []
        for w in chunk:
            if rng.random() < 0.4:
                toks.append(_FILLER[rng.integers(0, len(_FILLER))])
            toks.append(w if rng.random() < 0.8 else w.upper())
            if rng.random() < 0.1:
                toks[-1] += rng.choice([",", ":", ")"])
        if k == 0:
            toks = [location.upper(), position.upper() + ":"] + toks
        if not toks:
            toks = [_FILLER[rng.integers(0, len(_FILLER))]]
        text = " ".join(str(t) for t in toks)
        sentences.append(text[:1].upper() + text[1:] + rng.choice([".", ".", ";", "!"]))
    return RadiologyEntry(" ".join(sentences), location, position)


def generate_corpus(spec: GeneratorSpec) -> tuple[list[EpisodeRecord], dict]:
    """Episodes plus the generative tables that produced them."""
    tables = build_tables(spec)
    return [generate_episode(spec, tables, i) for i in range(spec.n_episodes)], tables


def write_tables(path: str | Path, tables: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(tables, fh, sort_keys=True, indent=1)
        fh.write("\n")


def corpus_stats(episodes: Sequence[EpisodeRecord]) -> dict:
    """Corpus overview in the layout of a dataset-statistics table."""
    per_case = [len(episode_categories(ep)) for ep in episodes]
    combos = {tuple(sorted(episode_categories(ep))) for ep in episodes}
    full_codes = {c.strip().upper() for ep in episodes for c in ep.codes}
    present = {m: 0 for m in MODALITIES}
    for ep in episodes:
        present["lab"] += bool(ep.labs)
        present["medications"] += bool(ep.medications)
        present["radiology"] += bool(ep.radiology)
        present["admission"] += ep.admission is not None
    return {
        "records": len(episodes),
        "avg_codes_per_case": float(np.mean(per_case)) if per_case else 0.0,
        "max_codes_per_case": max(per_case, default=0),
        "unique_codes": len(full_codes),
        "unique_categories": len({c for ep in episodes for c in episode_categories(ep)}),
        "unique_combinations": len(combos),
        "modality_presence": {m: present[m] / max(1, len(episodes)) for m in MODALITIES},
    }


# -- Bayes reference -------------------------------------------------------

def _log_phi(x: float) -> float:
    return math.log(max(1e-300, 0.5 * math.erfc(-x / math.sqrt(2.0))))


def _qual_bin_logprob(kind: str, obs: int, shift: float, offset: float) -> float:
    """log P(observed bin) for latent ~ N(shift + offset, 1)."""
    m = shift + offset
    if kind == "binary":
        return _log_phi(m) if obs == 1 else _log_phi(-m)
    edges = [-math.inf, 0.0, 1.0, 2.0, math.inf]
    lo, hi = edges[obs], edges[obs + 1]
    p = 0.5 * (math.erfc(-(hi - m) / math.sqrt(2)) - math.erfc(-(lo - m) / math.sqrt(2)))
    return math.log(max(1e-300, p))


def _qual_observation(kind: str, raw: str):
    try:
        v = parse_lab_value(raw)
    except CodexError:
        return None
    if v.mode is LabMode.CATEGORICAL:
        if v.category == "positive":
            return 1
        if v.category == "negative":
            return 0
        return None
    if v.category == "plus-grade":
        return min(3, int(v.numeric_value)) if kind == "grade" else 1
    return None


def _numeric_observation(raw: str):
    try:
        v = parse_lab_value(raw)
    except CodexError:
        return None
    if v.numeric_value is None or v.numeric_value <= 0:
        return None
    return math.log(v.numeric_value)


def _category_llr(ep: EpisodeRecord, tables: dict, drugs_active, tokens, lab_obs) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihood ratios (secondary vs absent, principal vs absent) per category."""
    C = len(tables["categories"])
    llr = np.zeros((2, C))
    for c in range(C):
        em = tables["emission"][c]
        for role in (1, 2):
            total = 0.0
            if drugs_active is not None:
                p0, p1 = em["drug_rates"][0], em["drug_rates"][role]
                for d in tables["drugs"][c]:
                    total += _bernoulli_llr(d in drugs_active, p1, p0)
            if tokens is not None:
                p0, p1 = em["token_rates"][0], em["token_rates"][role]
                for w in tables["tokens"][c]:
                    total += _bernoulli_llr(w in tokens, p1, p0)
            if lab_obs is not None:
                f0, f1 = em["test_rates"][0], em["test_rates"][role]
                for t in tables["tests"][c]:
                    raws = lab_obs.get(t["test_id"], [])
                    total += _bernoulli_llr(bool(raws), f1, f0)
                    for raw in raws:
                        if t["kind"] == "numeric":
                            x = _numeric_observation(raw)
                            if x is None:
                                continue
                            z = (x - t["mu"]) / t["sigma"]
                            d = em["numeric_shift"][role]
                            total += z * d - 0.5 * d * d
                        else:
                            obs = _qual_observation(t["kind"], raw)
                            if obs is None:
                                continue
                            total += (_qual_bin_logprob(t["kind"], obs, em["qual_shift"][role], tables["qual_offset"])
                                      - _qual_bin_logprob(t["kind"], obs, 0.0, tables["qual_offset"]))
            llr[role - 1, c] = total
    return llr[0], llr[1]


def _bernoulli_llr(hit: bool, p1: float, p0: float) -> float:
    eps = 1e-12
    if hit:
        return math.log(max(p1, eps)) - math.log(max(p0, eps))
    return math.log(max(1 - p1, eps)) - math.log(max(1 - p0, eps))


def posterior(ep: EpisodeRecord, tables: dict) -> tuple[np.ndarray, np.ndarray]:
    """(P(category in label set | evidence), P(category is principal | evidence))."""
    drugs_active = active_drugs(ep) if ep.medications else None
    tokens = None
    if ep.radiology:
        tokens = set()
        for rep in ep.radiology:
            for sent in clean_radiology_text(rep.text).sentences:
                tokens.update(sent)
    lab_obs = None
    if ep.labs:
        lab_obs = {}
        for entry in ep.labs:
            lab_obs.setdefault(entry.test_id, []).append(entry.value)
    llr_sec, llr_prin = _category_llr(ep, tables, drugs_active, tokens, lab_obs)
    prior = np.asarray(tables["prior"])
    q = np.asarray(tables["secondary"])
    with np.errstate(divide="ignore"):
        log_q, log_1mq = np.log(q), np.log1p(-q)
    # z_c = log((1 - q_c) + q_c * r_sec_c): normalizer of category c as a non-principal
    z = np.logaddexp(log_1mq, log_q + llr_sec)
    logits = np.log(prior) + llr_prin - z
    w = np.exp(logits - logits.max())
    w /= w.sum()
    s = np.exp(log_q + llr_sec - z)
    return w + (1.0 - w) * s, w


def bayes_reference(
    episodes: Sequence[EpisodeRecord], tables: dict, vocab: CodeVocabulary | None = None, threshold: float = 0.5
) -> tuple[EvalReport, np.ndarray, np.ndarray]:
    """Score every episode with the true posterior and evaluate it.

    With ``vocab`` the columns are restricted to (and ordered like) the
    vocabulary, and truth comes from the episodes' retained categories.
    Returns (report, marginal scores, principal posterior).
    """
    from .data import label_matrix

    cats = tables["categories"]
    cols = list(range(len(cats))) if vocab is None else [cats.index(c) for c in vocab.categories]
    marg, prin = [], []
    for ep in episodes:
        m, w = posterior(ep, tables)
        marg.append(m[cols])
        prin.append(w[cols])
    M, W = np.array(marg), np.array(prin)
    if vocab is None:
        vocab = CodeVocabulary(tuple(cats), {c: 0 for c in cats}, 1)
    Y, principal = label_matrix(episodes, vocab)
    rep = evaluate(M, Y, principal, threshold)
    rep = EvalReport(rep.lrap, rep.ranking_loss, rep.coverage_error, rep.micro_f1, rep.jaccard,
                     float(np.mean(np.argmax(W, axis=1) == principal)), rep.n_records)
    return rep, M, W
