from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entkit.documents import (
    CorpusError,
    DocType,
    Document,
    Field,
    Span,
    document_to_dict,
    load_documents,
    save_documents,
    validate_span,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_single_document(tmp_path):
    path = tmp_path / "docs.jsonl"
    write_lines(
        path,
        ['{"id":"d1","doc_type":"ad","language":"en","fields":[{"name":"title","text":"Red shoes"}]}'],
    )
    docs = load_documents(path)
    assert len(docs) == 1
    assert docs[0].id == "d1"
    assert len(docs[0].fields) == 1
    assert docs[0].fields[0].text == "Red shoes"


def test_load_empty_file(tmp_path):
    path = tmp_path / "docs.jsonl"
    path.write_text("")
    assert load_documents(path) == []


def test_duplicate_id_names_both_lines(tmp_path):
    path = tmp_path / "docs.jsonl"
    line = '{"id":"d1","doc_type":"ad","language":"en","fields":[{"name":"t","text":"x"}]}'
    write_lines(path, [line, line])
    with pytest.raises(CorpusError, match=r"lines 1 and 2"):
        load_documents(path)


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "docs.jsonl"
    write_lines(path, ["{not json"])
    with pytest.raises(CorpusError, match=r":1:"):
        load_documents(path)


def test_unknown_doc_type_rejected(tmp_path):
    path = tmp_path / "docs.jsonl"
    write_lines(
        path,
        ['{"id":"d1","doc_type":"email","language":"en","fields":[{"name":"t","text":"x"}]}'],
    )
    with pytest.raises(CorpusError):
        load_documents(path)


def test_validate_span_examples(biden_doc):
    assert validate_span(biden_doc, Span("title", 0, 9)) == "Joe Biden"
    assert validate_span(biden_doc, Span("title", 4, 9)) == "Biden"


def test_empty_span_rejected():
    with pytest.raises(CorpusError):
        Span("title", 0, 0)


def test_span_errors(biden_doc):
    with pytest.raises(CorpusError):
        validate_span(biden_doc, Span("body", 0, 3))
    with pytest.raises(CorpusError):
        validate_span(biden_doc, Span("title", 0, 99))


def test_duplicate_field_names_rejected():
    with pytest.raises(CorpusError):
        Document("d", DocType.AD, "en", (Field("t", "a"), Field("t", "b")))


def test_language_must_be_lowercase():
    with pytest.raises(CorpusError):
        Document("d", DocType.AD, "EN", (Field("t", "a"),))


def test_unicode_offsets_are_scalar_values():
    doc = Document("d", DocType.UGC, "vi", (Field("t", "café ngon"),))
    # 'café' is 4 scalar values even though it is 5 UTF-8 bytes
    assert validate_span(doc, Span("t", 0, 4)) == "café"


_word = st.text(
    alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FA0), min_size=1, max_size=8
)


@st.composite
def documents(draw):
    n_fields = draw(st.integers(1, 3))
    fields = []
    for i in range(n_fields):
        words = draw(st.lists(_word, min_size=0, max_size=6))
        fields.append(Field(f"f{i}", " ".join(words)))
    return Document(
        id=draw(st.text(min_size=1, max_size=6)),
        doc_type=draw(st.sampled_from(list(DocType))),
        language=draw(st.sampled_from(["en", "fr", "vi", "ar", "pt-br"])),
        fields=tuple(fields),
    )


@given(st.lists(documents(), max_size=5))
@settings(max_examples=60)
def test_round_trip(tmp_path_factory, docs):
    # unique ids required within one file
    seen = set()
    unique = []
    for d in docs:
        if d.id not in seen:
            seen.add(d.id)
            unique.append(d)
    path = tmp_path_factory.mktemp("rt") / "docs.jsonl"
    save_documents(unique, path)
    loaded = load_documents(path)
    assert loaded == unique
    assert [document_to_dict(d) for d in loaded] == [document_to_dict(d) for d in unique]
