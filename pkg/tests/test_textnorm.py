from __future__ import annotations

import unicodedata

from hypothesis import given, settings
from hypothesis import strategies as st

from entkit.textnorm import normalize_text, normalize_with_map


def test_collapse_and_casefold():
    assert normalize_text("  Joe   BIDEN ") == "joe biden"


def test_diacritics_stripped():
    assert normalize_text("Café") == "cafe"


def test_empty():
    assert normalize_text("") == ""
    assert normalize_text("   ") == ""


def test_origins_map_back():
    nt = normalize_with_map("Joe   BIDEN")
    assert nt.text == "joe biden"
    # the collapsed space originates at the first whitespace character
    assert nt.origins == (0, 1, 2, 3, 6, 7, 8, 9, 10)
    assert nt.source_span(0, 9) == (0, 11)
    assert nt.source_span(4, 9) == (6, 11)


def test_multichar_expansion_keeps_origin():
    nt = normalize_with_map("straße")
    assert nt.text == "strasse"
    # both 's' outputs of the eszett share origin index 4
    assert nt.origins == (0, 1, 2, 3, 4, 4, 5)
    assert not nt.is_boundary(5)
    assert nt.is_boundary(4) and nt.is_boundary(6)


@given(st.text(max_size=60))
@settings(max_examples=300)
def test_idempotent(text):
    once = normalize_text(text)
    assert normalize_text(once) == once


@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=60))
def test_ascii_stable(text):
    # pure-ASCII lowercase input maps to itself modulo whitespace collapse
    collapsed = " ".join(text.lower().split())
    assert normalize_text(text.lower()) == collapsed


@given(st.text(max_size=60))
@settings(max_examples=300)
def test_no_marks_or_uppercase_survive(text):
    out = normalize_text(text)
    assert out == out.casefold()
    assert all(unicodedata.category(c) != "Mn" for c in out)
    assert "  " not in out
    assert out == out.strip()


@given(st.text(max_size=40))
@settings(max_examples=300)
def test_origins_monotone_and_bounded(text):
    nt = normalize_with_map(text)
    assert len(nt.origins) == len(nt.text)
    assert all(0 <= o < len(text) for o in nt.origins)
    assert all(a <= b for a, b in zip(nt.origins, nt.origins[1:]))
