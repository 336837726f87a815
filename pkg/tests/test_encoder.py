from __future__ import annotations

import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entkit.documents import DocType, Document, Field, Span
from entkit.encoder import (
    Encoder,
    EncoderError,
    EncoderSpec,
    fnv1a_64,
    ngram_vector,
    pool,
    tokenize,
)


# independent scalar oracle: textbook FNV-1a-64 constants, reduce-style
def fnv_oracle(data: bytes) -> int:
    return functools.reduce(
        lambda h, b: ((h ^ b) * 0x100000001B3) % 2**64, data, 0xCBF29CE484222325
    )


def test_tokenize_edge_punctuation():
    toks = tokenize("Red shoes!")
    assert [(t.text, t.start, t.end) for t in toks] == [
        ("Red", 0, 3),
        ("shoes", 4, 9),
        ("!", 9, 10),
    ]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_two_words():
    toks = tokenize("Joe Biden")
    assert [(t.text, t.start, t.end) for t in toks] == [("Joe", 0, 3), ("Biden", 4, 9)]


def test_tokenize_leading_and_interior_punctuation():
    toks = tokenize('("don\'t")')
    assert [t.text for t in toks] == ["(", '"', "don't", '"', ")"]


def test_tokenize_offsets_reconstruct_text():
    text = "a, b!  (c) d's   e"
    toks = tokenize(text)
    rebuilt = list(" " * len(text))
    for t in toks:
        rebuilt[t.start : t.end] = t.text
    assert "".join(rebuilt) == text


@given(st.text(max_size=80))
@settings(max_examples=300)
def test_tokenize_offset_integrity(text):
    toks = tokenize(text)
    prev_end = -1
    for t in toks:
        assert t.text == text[t.start : t.end]
        assert t.start >= prev_end  # sorted, non-overlapping
        prev_end = t.end
    covered = set()
    for t in toks:
        covered.update(range(t.start, t.end))
    for i, ch in enumerate(text):
        assert (i in covered) == (not ch.isspace())


def test_fnv_against_oracle():
    for text in ("#ab", "ab#", "", "hello", "日本語"):
        assert fnv1a_64(text.encode("utf-8")) == fnv_oracle(text.encode("utf-8"))


def test_ngram_vector_ab():
    # frozen from the scalar oracle:
    #   fnv("#ab") = 14787487015445678033 -> index 17, top bit set -> sign -1
    #   fnv("ab#") = 16654278544129639435 -> index 11, top bit set -> sign -1
    assert fnv_oracle(b"#ab") == 14787487015445678033
    assert fnv_oracle(b"ab#") == 16654278544129639435
    v = ngram_vector("ab", dim=64, n=3)
    assert np.count_nonzero(v) <= 2
    assert math.isclose(np.linalg.norm(v), 1.0, abs_tol=1e-9)
    assert v[17] == pytest.approx(-1 / math.sqrt(2))
    assert v[11] == pytest.approx(-1 / math.sqrt(2))


def test_ngram_vector_deterministic():
    assert np.array_equal(ngram_vector("token"), ngram_vector("token"))


def test_encode_identical_tokens_identical_vectors():
    doc = Document("d", DocType.AD, "en", (Field("t", "red red blue"),))
    enc = Encoder().encode(doc)["t"]
    assert np.array_equal(enc.vectors[0], enc.vectors[1])
    assert not np.array_equal(enc.vectors[0], enc.vectors[2])


def test_encode_deterministic_across_instances():
    doc = Document("d", DocType.AD, "en", (Field("t", "alpha beta gamma"),))
    a = Encoder().encode(doc)["t"].vectors
    b = Encoder().encode(doc)["t"].vectors
    assert a.tobytes() == b.tobytes()


def test_norms_within_tolerance():
    doc = Document("d", DocType.AD, "en", (Field("t", "one two three four"),))
    enc = Encoder().encode(doc)["t"]
    norms = np.linalg.norm(enc.vectors, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_invocation_counter():
    doc = Document("d", DocType.AD, "en", (Field("t", "x y"), Field("u", "z")))
    enc = Encoder()
    assert enc.invocations == 0
    enc.encode(doc)
    assert enc.invocations == 1
    enc.encode(doc)
    assert enc.invocations == 2


def test_counter_thread_safe():
    import threading

    doc = Document("d", DocType.AD, "en", (Field("t", "a b c"),))
    enc = Encoder()
    threads = [
        threading.Thread(target=lambda: [enc.encode(doc) for _ in range(50)])
        for _ in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert enc.invocations == 400


def test_pool_single_token(biden_doc):
    enc = Encoder().encode(biden_doc)["title"]
    v = pool(enc, Span("title", 0, 3))
    assert np.allclose(v, enc.vectors[0])


def test_pool_two_identical_tokens():
    doc = Document("d", DocType.AD, "en", (Field("t", "red red"),))
    enc = Encoder().encode(doc)["t"]
    v = pool(enc, Span("t", 0, 7))
    assert np.allclose(v, enc.vectors[0])


def test_pool_mean_matches_scalar_arithmetic(biden_doc):
    # oracle: recompute the pooled vector with plain python loops
    enc = Encoder().encode(biden_doc)["title"]
    v = pool(enc, Span("title", 0, 9))  # covers "Joe Biden"
    dim = enc.vectors.shape[1]
    mean = [0.0] * dim
    for row in (0, 1):
        for k in range(dim):
            mean[k] += enc.vectors[row, k] / 2.0
    norm = math.sqrt(sum(x * x for x in mean))
    expected = [x / norm for x in mean]
    assert np.allclose(v, expected, atol=1e-12)


def test_pool_no_overlap_raises(biden_doc):
    enc = Encoder().encode(biden_doc)["title"]
    with pytest.raises(EncoderError):
        pool(enc, Span("title", 9, 10))  # the inter-token space only


def test_spec_validation():
    with pytest.raises(EncoderError):
        EncoderSpec(dim=4)
    with pytest.raises(EncoderError):
        EncoderSpec(kind="bert")


def test_external_encoder_roundtrip(tmp_path):
    import json

    doc = Document("d9", DocType.AD, "en", (Field("t", "aa bb"),))
    path = tmp_path / "vecs.jsonl"
    dim = 8
    rows = []
    for i in range(2):
        vec = [0.0] * dim
        vec[i] = 1.0
        rows.append({"doc_id": "d9", "field": "t", "token_index": i, "vector": vec})
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    enc = Encoder(EncoderSpec(kind="external", dim=8, vectors_path=str(path)))
    out = enc.encode(doc)["t"]
    assert out.vectors[0, 0] == 1.0 and out.vectors[1, 1] == 1.0


def test_external_encoder_missing_doc(tmp_path):
    path = tmp_path / "vecs.jsonl"
    path.write_text("")
    enc = Encoder(EncoderSpec(kind="external", dim=8, vectors_path=str(path)))
    doc = Document("nope", DocType.AD, "en", (Field("t", "aa"),))
    with pytest.raises(EncoderError):
        enc.encode(doc)
