import datetime as dt
import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from codex_ensemble.errors import EmptyValue, InvalidDates, Unparseable
from codex_ensemble.lexicons import default_lexicons
from codex_ensemble.parsers import (
    LabMode,
    clean_radiology_text,
    normalize_medication,
    parse_admission,
    parse_lab_value,
    render_lab_value,
)

GOLDEN = Path(__file__).parent / "data" / "golden_lab_values.tsv"


def load_golden():
    rows = []
    for line in GOLDEN.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        raw, mode, fields = line.split("\t")
        rows.append((json.loads(raw), mode, json.loads(fields)))
    return rows


GOLDEN_ROWS = load_golden()


def check_golden(raw, mode, fields):
    if mode == "empty":
        with pytest.raises(EmptyValue):
            parse_lab_value(raw)
        return
    if mode == "unparseable":
        with pytest.raises(Unparseable):
            parse_lab_value(raw)
        return
    parsed = parse_lab_value(raw)
    assert parsed.mode.value == mode
    got = parsed.to_dict()
    for key in ("numeric_value", "unit", "category", "range"):
        assert got[key] == fields.get(key), (raw, key)


def test_golden_corpus_size_and_exemplars():
    assert len(GOLDEN_ROWS) >= 60
    raws = {r for r, _, _ in GOLDEN_ROWS}
    for exemplar in ("neg", "-ve", "positive", "1+", "716.3 iu/ml", "range 2-4"):
        assert exemplar in raws


@pytest.mark.parametrize("raw,mode,fields", GOLDEN_ROWS, ids=[repr(r[0]) for r in GOLDEN_ROWS])
def test_golden_corpus(raw, mode, fields):
    check_golden(raw, mode, fields)


def test_mode_invariants_over_golden():
    cats = set(default_lexicons().categories.values())
    for raw, mode, _ in GOLDEN_ROWS:
        if mode in ("empty", "unparseable"):
            continue
        v = parse_lab_value(raw)
        assert parse_lab_value(raw) == v
        if v.mode is LabMode.NUMERIC:
            assert v.numeric_value is not None and v.category is None
        elif v.mode is LabMode.CATEGORICAL:
            assert v.category in cats and v.numeric_value is None
        else:
            assert v.numeric_value is not None or v.range is not None
        if v.range is not None:
            assert v.range[0] <= v.range[1]


@pytest.mark.parametrize("raw,mode,_f", [r for r in GOLDEN_ROWS if r[1] not in ("empty", "unparseable")])
def test_render_roundtrip_golden(raw, mode, _f):
    v = parse_lab_value(raw)
    assert parse_lab_value(render_lab_value(v)) == v


_numbers = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False).map(lambda x: round(x, 3))
_units = st.sampled_from(sorted(default_lexicons().units))
_noise = st.sampled_from(["", "!", "!!", "##", " ", "..", "*"])


@st.composite
def messy_lab_strings(draw):
    kind = draw(st.integers(0, 5))
    x = draw(_numbers)
    if kind == 0:
        body = repr(x)
    elif kind == 1:
        body = f"{abs(x)!r} {draw(_units)}"
    elif kind == 2:
        y = draw(_numbers)
        body = f"range {x!r}-{y!r}"
    elif kind == 3:
        body = draw(st.sampled_from(sorted(default_lexicons().categories)))
    elif kind == 4:
        body = f"{draw(st.integers(1, 4))}+"
    else:
        body = f"<{abs(x)!r}"
    case = draw(st.sampled_from([str.lower, str.upper, str.title]))
    return case(body) + draw(_noise)


@given(messy_lab_strings())
def test_parse_render_idempotent(raw):
    v = parse_lab_value(raw)
    again = parse_lab_value(render_lab_value(v))
    assert again == v
    assert parse_lab_value(raw) == v


def test_clean_radiology_example():
    rep = clean_radiology_text("CHEST PA: No infiltrate. Heart size normal.")
    assert rep.sentences[0] == ("chest", "pa", "infiltrate")
    assert rep.sentences[1] == ("heart", "size", "normal")
    assert rep.sentences[2:] == ((), (), ())
    assert rep.position_tags == {"pa"}
    assert rep.location_tags == {"chest"}


def test_clean_radiology_empty_and_stopword_saturation():
    assert clean_radiology_text("").sentences == ((),) * 5
    rep = clean_radiology_text("a. b. c. d. e. f.")
    assert rep.sentences == ((),) * 5
    assert not rep.location_tags and not rep.position_tags


def test_clean_radiology_keeps_first_five_and_decimals():
    rep = clean_radiology_text("one. two. three. four. five. six! seven?")
    assert [s[0] for s in rep.sentences] == ["one", "two", "three", "four", "five"]
    rep = clean_radiology_text("Nodule 3.5 cm; stable")
    assert rep.sentences[0] == ("nodule", "3", "5", "cm")
    assert rep.sentences[1] == ("stable",)


@given(st.text(max_size=200))
def test_clean_radiology_output_alphabet(raw):
    rep = clean_radiology_text(raw)
    assert len(rep.sentences) == 5
    for sent in rep.sentences:
        for tok in sent:
            assert tok and all(c in "abcdefghijklmnopqrstuvwxyz0123456789" for c in tok)
            assert tok not in default_lexicons().stopwords


def test_parse_admission_examples():
    f = parse_admission("female", dt.date(1980, 1, 1), dt.date(2015, 6, 15), dt.date(2015, 6, 20))
    assert (f.gender, f.length_of_stay_days, f.admit_month, f.admit_day, f.admit_year) == (0, 5, 6, 15, 2015)
    newborn = parse_admission("male", dt.date(2015, 6, 15), dt.date(2015, 6, 15), None)
    assert newborn.gender == 1 and newborn.length_of_stay_days == 0 and newborn.age_bin == 0
    with pytest.raises(InvalidDates):
        parse_admission("m", dt.date(1980, 1, 1), dt.date(2015, 6, 15), dt.date(2015, 6, 1))
    with pytest.raises(InvalidDates):
        parse_admission("m", dt.date(2016, 1, 1), dt.date(2015, 6, 15), None)


def test_age_binning_edges():
    edges = (1, 5, 15)
    birth = dt.date(2000, 6, 15)
    assert parse_admission("m", birth, dt.date(2001, 6, 14), bins=edges).age_bin == 0
    assert parse_admission("m", birth, dt.date(2001, 6, 15), bins=edges).age_bin == 1
    assert parse_admission("m", birth, dt.date(2030, 1, 1), bins=edges).age_bin == 3


def test_normalize_medication_examples():
    assert normalize_medication("amoxi500", "active") == "AMOXI500"
    assert normalize_medication("amoxi500", "CANCELLED") is None
    assert normalize_medication("  x1 ", "active") == "X1"
    assert normalize_medication("x1", " Void ") is None


@given(
    st.text(alphabet="abcxyz0123", min_size=1, max_size=8),
    st.sampled_from(["active", "given", "cancelled", "CANCELED", "void", "Canceled", "held"]),
)
def test_medication_none_iff_cancelled(code, status):
    cancelled = status.strip().lower() in default_lexicons().cancellation
    assert (normalize_medication(code, status) is None) == cancelled
