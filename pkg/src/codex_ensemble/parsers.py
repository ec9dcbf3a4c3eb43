"""Parsers for raw clinical strings: lab values, radiology text, admissions, medications.

All functions here are pure.  Lexicons default to the packaged ones and can
be swapped by passing a :class:`~codex_ensemble.lexicons.Lexicons`.
"""

from __future__ import annotations

import bisect
import datetime as dt
import enum
import re
import unicodedata
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import EmptyValue, InvalidDates, Unparseable
from .lexicons import Lexicons, default_lexicons

N_SENTENCES = 5

DEFAULT_AGE_EDGES = (1, 5, 15, 25, 35, 45, 55, 65, 75, 85)

# 0 = female, 1 = male
DEFAULT_GENDER_CODES = {
    "f": 0, "female": 0, "w": 0, "woman": 0,
    "m": 1, "male": 1, "man": 1,
}


class LabMode(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    MIXTURE = "mixture"


@dataclass(frozen=True)
class ParsedLabValue:
    mode: LabMode
    numeric_value: Optional[float] = None
    unit: Optional[str] = None
    category: Optional[str] = None
    range: Optional[tuple[float, float]] = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "numeric_value": self.numeric_value,
            "unit": self.unit,
            "category": self.category,
            "range": list(self.range) if self.range is not None else None,
        }


_NUM = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:e[-+]?\d+)?"
_PURE_NUMBER = re.compile(rf"^{_NUM}$")
_PLUS_GRADE = re.compile(r"^(?:(\d+)\s*\+|(\++))$")
_RANGE = re.compile(rf"^(?:range\s*)?({_NUM})\s*(?:-|to)\s*({_NUM})(?:\s*(\S+))?$")
_COMPARATOR = re.compile(rf"^(<=?|>=?)\s*({_NUM})(?:\s*(\S+))?$")
_WITH_UNIT = re.compile(rf"^({_NUM})\s*(\S+)$")
_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_BAD_CHARS = re.compile(r"[^a-z0-9 .+\-/%^<>=]")


def _clean_lab_string(raw: str) -> str:
    s = unicodedata.normalize("NFKC", raw).lower()
    s = s.replace("µ", "u").replace("μ", "u")
    s = "".join(ch for ch in s if unicodedata.category(ch)[0] != "C")
    s = _THOUSANDS.sub("", s)
    s = _BAD_CHARS.sub(" ", s)
    s = re.sub(r"\.{2,}", ".", s)
    s = re.sub(r"/{2,}", "/", s)
    s = " ".join(s.split())
    s = s.rstrip(" ./-=")
    s = s.lstrip(" /=")
    if s.startswith(".") and not s[1:2].isdigit():
        s = s.lstrip(".").lstrip()
    return s


def _to_float(text: str) -> float:
    value = float(text)
    if value != value or value in (float("inf"), float("-inf")):
        raise Unparseable(f"non-finite number {text!r}")
    return value


def parse_lab_value(raw: str, lexicons: Lexicons | None = None) -> ParsedLabValue:
    """Classify a raw lab result as numeric, categorical or mixture.

    Raises :class:`EmptyValue` on blank input and :class:`Unparseable` when no
    mode matches; callers decide whether to drop the value.
    """
    if raw is None or not raw.strip():
        raise EmptyValue("blank lab value")
    lex = lexicons or default_lexicons()
    s = _clean_lab_string(raw)
    if not s:
        raise Unparseable(f"nothing left after cleaning {raw!r}")

    if s in lex.categories:
        return ParsedLabValue(LabMode.CATEGORICAL, category=lex.categories[s])

    if _PURE_NUMBER.match(s):
        return ParsedLabValue(LabMode.NUMERIC, numeric_value=_to_float(s))

    m = _PLUS_GRADE.match(s)
    if m:
        grade = float(m.group(1)) if m.group(1) is not None else float(len(m.group(2)))
        return ParsedLabValue(LabMode.MIXTURE, numeric_value=grade, category="plus-grade")

    m = _RANGE.match(s)
    if m:
        a, b, unit = _to_float(m.group(1)), _to_float(m.group(2)), m.group(3)
        if unit is not None and unit not in lex.units:
            raise Unparseable(f"unknown unit {unit!r} in {raw!r}")
        low, high = min(a, b), max(a, b)
        return ParsedLabValue(
            LabMode.MIXTURE, numeric_value=(low + high) / 2.0, unit=unit, range=(low, high)
        )

    m = _COMPARATOR.match(s)
    if m:
        unit = m.group(3)
        if unit is not None and unit not in lex.units:
            raise Unparseable(f"unknown unit {unit!r} in {raw!r}")
        category = "below" if m.group(1).startswith("<") else "above"
        return ParsedLabValue(
            LabMode.MIXTURE, numeric_value=_to_float(m.group(2)), unit=unit, category=category
        )

    m = _WITH_UNIT.match(s)
    if m and m.group(2) in lex.units:
        return ParsedLabValue(LabMode.MIXTURE, numeric_value=_to_float(m.group(1)), unit=m.group(2))

    raise Unparseable(f"no parsing mode matches {raw!r}")


def render_lab_value(value: ParsedLabValue) -> str:
    """Canonical text form; parsing it reproduces ``value``."""
    if value.mode is LabMode.NUMERIC:
        return repr(value.numeric_value)
    if value.mode is LabMode.CATEGORICAL:
        return value.category
    suffix = f" {value.unit}" if value.unit else ""
    if value.category == "plus-grade":
        return f"{int(value.numeric_value)}+"
    if value.range is not None:
        return f"range {value.range[0]!r}-{value.range[1]!r}{suffix}"
    if value.category in ("below", "above"):
        op = "<" if value.category == "below" else ">"
        return f"{op}{value.numeric_value!r}{suffix}"
    return f"{value.numeric_value!r}{suffix}"


@dataclass(frozen=True)
class CleanedReport:
    sentences: tuple[tuple[str, ...], ...]
    location_tags: frozenset[str] = frozenset()
    position_tags: frozenset[str] = frozenset()

    @property
    def is_empty(self) -> bool:
        return not any(self.sentences) and not self.location_tags and not self.position_tags


_SENTENCE_END = re.compile(r"[.!?;]+(?:\s+|$)")
_NON_ALNUM = re.compile(r"[^a-z0-9 ]")


def clean_radiology_text(
    raw: str, stopwords: frozenset[str] | None = None, lexicons: Lexicons | None = None
) -> CleanedReport:
    """Lowercase, strip special characters and stop words, and cut into 5 sentence slots.

    Segments that are empty after cleaning do not take a slot.  Location and
    position tags are matched on tokens before stop-word removal.
    """
    lex = lexicons or default_lexicons()
    stop = lex.stopwords if stopwords is None else stopwords
    locations, positions = set(lex.locations), set(lex.positions)
    sentences: list[tuple[str, ...]] = []
    loc_tags: set[str] = set()
    pos_tags: set[str] = set()
    text = unicodedata.normalize("NFKC", raw or "").lower()
    for segment in _SENTENCE_END.split(text):
        tokens = _NON_ALNUM.sub(" ", segment).split()
        loc_tags.update(t for t in tokens if t in locations)
        pos_tags.update(t for t in tokens if t in positions)
        kept = tuple(t for t in tokens if t not in stop)
        if kept and len(sentences) < N_SENTENCES:
            sentences.append(kept)
    sentences.extend(() for _ in range(N_SENTENCES - len(sentences)))
    return CleanedReport(tuple(sentences), frozenset(loc_tags), frozenset(pos_tags))


@dataclass(frozen=True)
class AdmissionFields:
    gender: int
    age_bin: int
    length_of_stay_days: int
    admit_day: int
    admit_month: int
    admit_year: int


def age_in_years(birth: dt.date, on: dt.date) -> int:
    return on.year - birth.year - ((on.month, on.day) < (birth.month, birth.day))


def parse_admission(
    gender_raw: str,
    birth_date: dt.date,
    admit_date: dt.date,
    discharge_date: Optional[dt.date] = None,
    bins: Sequence[int] = DEFAULT_AGE_EDGES,
    gender_codes: dict[str, int] | None = None,
) -> AdmissionFields:
    """Encode gender, age group, length of stay and admission date parts.

    ``bins`` are ascending age edges; ``len(bins) + 1`` groups result.
    """
    if admit_date < birth_date:
        raise InvalidDates(f"admission {admit_date} precedes birth {birth_date}")
    if discharge_date is not None and discharge_date < admit_date:
        raise InvalidDates(f"discharge {discharge_date} precedes admission {admit_date}")
    codes = gender_codes or DEFAULT_GENDER_CODES
    key = (gender_raw or "").strip().lower()
    if key not in codes:
        raise Unparseable(f"unknown gender {gender_raw!r}")
    los = 0 if discharge_date is None else (discharge_date - admit_date).days
    age = age_in_years(birth_date, admit_date)
    return AdmissionFields(
        gender=codes[key],
        age_bin=bisect.bisect_right(list(bins), age),
        length_of_stay_days=los,
        admit_day=admit_date.day,
        admit_month=admit_date.month,
        admit_year=admit_date.year,
    )


def normalize_medication(
    drug_code: str, status: str, lexicons: Lexicons | None = None
) -> Optional[str]:
    """Canonical drug code, or None for a cancelled prescription."""
    lex = lexicons or default_lexicons()
    if (status or "").strip().lower() in lex.cancellation:
        return None
    code = (drug_code or "").strip().upper()
    return code or None
