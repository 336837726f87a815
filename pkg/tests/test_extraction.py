from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entkit.documents import DocType, Document, Field
from entkit.encoder import Encoder, EncoderSpec, Token, TokenEncoding
from entkit.extraction import (
    DecodeConfig,
    ExtractionError,
    HeadParams,
    decode_spans,
    load_heads,
    multi_task_extract,
    save_heads,
    score_tokens,
    train_head,
)


def make_tokens(n, field="t"):
    return [Token(field, 2 * i, 2 * i + 1, "x") for i in range(n)]


def decode_oracle(scores, tokens, cfg):
    """Brute-force maximal-run enumeration, written as a plain scan."""
    out = []
    run = []
    for i in range(len(tokens) + 1):
        inside = (
            i < len(tokens)
            and scores[i] > cfg.threshold
            and (not run or tokens[i].field_name == tokens[run[-1]].field_name)
        )
        if inside:
            run.append(i)
            continue
        if run and cfg.min_tokens <= len(run) <= cfg.max_tokens:
            out.append(
                (tokens[run[0]].field_name, tokens[run[0]].start, tokens[run[-1]].end)
            )
        run = [i] if i < len(tokens) and scores[i] > cfg.threshold else []
    return out


# -- score_tokens --------------------------------------------------------


def test_zero_head_scores_half():
    head = HeadParams("x", np.zeros((4, 8)), np.zeros(4), np.zeros(4), 0.0)
    enc = TokenEncoding(make_tokens(3), np.ones((3, 8)) / math.sqrt(8))
    assert np.allclose(score_tokens(enc, head), 0.5)


def test_hand_set_single_unit_head():
    # sigmoid(1) with a 1x1 pass-through head; oracle value from scalar math
    head = HeadParams("x", np.array([[1.0]]), np.zeros(1), np.ones(1), 0.0)
    enc = TokenEncoding(make_tokens(1), np.array([[1.0]]))
    assert score_tokens(enc, head)[0] == pytest.approx(0.7310585786300049, abs=1e-12)


def test_identical_vectors_identical_scores():
    head = HeadParams.init("x", dim=8, hidden=4, seed=1)
    vec = np.ones(8) / math.sqrt(8)
    enc = TokenEncoding(make_tokens(3), np.vstack([vec, vec, vec]))
    s = score_tokens(enc, head)
    assert s[0] == s[1] == s[2]


def test_dim_mismatch():
    head = HeadParams.init("x", dim=16, hidden=4)
    enc = TokenEncoding(make_tokens(2), np.zeros((2, 8)))
    with pytest.raises(ExtractionError):
        score_tokens(enc, head)


# -- decode_spans ---------------------------------------------------------


def test_decode_two_runs():
    tokens = make_tokens(4)
    spans = decode_spans(np.array([0.9, 0.8, 0.2, 0.7]), tokens, DecodeConfig())
    assert [(s.start, s.end) for s in spans] == [(0, 3), (6, 7)]


def test_decode_nothing_above_threshold():
    tokens = make_tokens(3)
    assert decode_spans(np.array([0.5, 0.1, 0.5]), tokens, DecodeConfig()) == []


def test_decode_run_exceeding_cap_dropped():
    tokens = make_tokens(20)
    spans = decode_spans(np.full(20, 0.6), tokens, DecodeConfig(max_tokens=16))
    assert spans == []


def test_decode_min_tokens():
    tokens = make_tokens(5)
    cfg = DecodeConfig(min_tokens=2)
    spans = decode_spans(np.array([0.9, 0.1, 0.9, 0.9, 0.1]), tokens, cfg)
    assert [(s.start, s.end) for s in spans] == [(4, 7)]


def test_decode_never_crosses_fields():
    tokens = [Token("a", 0, 1, "x"), Token("a", 2, 3, "x"), Token("b", 0, 1, "x")]
    spans = decode_spans(np.array([0.9, 0.9, 0.9]), tokens, DecodeConfig())
    assert [(s.field_name, s.start, s.end) for s in spans] == [("a", 0, 3), ("b", 0, 1)]


@given(
    st.lists(st.floats(0.0, 1.0), min_size=0, max_size=64),
    st.integers(1, 4),
    st.integers(1, 20),
)
@settings(max_examples=500)
def test_decode_matches_oracle(scores, min_tokens, max_tokens):
    if min_tokens > max_tokens:
        min_tokens, max_tokens = max_tokens, min_tokens
    cfg = DecodeConfig(threshold=0.5, min_tokens=min_tokens, max_tokens=max_tokens)
    tokens = make_tokens(len(scores))
    got = [(s.field_name, s.start, s.end) for s in decode_spans(np.array(scores), tokens, cfg)]
    assert got == decode_oracle(scores, tokens, cfg)


# -- multi_task_extract ----------------------------------------------------


def corpus_doc(i=0):
    return Document(
        f"d{i}",
        DocType.AD,
        "en",
        (Field("title", "red shoes sale"), Field("body", "the red shoes shine")),
    )


def test_multi_task_single_encode():
    heads = [HeadParams.init(f"t{i}", dim=64, seed=i) for i in range(7)]
    enc = Encoder()
    multi_task_extract(corpus_doc(), heads, DecodeConfig(), enc)
    assert enc.invocations == 1


def test_multi_task_matches_manual_composition():
    from entkit.encoder import pool

    head = HeadParams.init("x", dim=64, seed=3)
    enc = Encoder()
    doc = corpus_doc()
    got = multi_task_extract(doc, [head], DecodeConfig(), enc)["x"]
    manual = []
    encodings = Encoder().encode(doc)
    for field in doc.fields:
        encoding = encodings[field.name]
        scores = score_tokens(encoding, head)
        for span in decode_spans(scores, encoding.tokens, DecodeConfig()):
            manual.append((span.field_name, span.start, span.end))
    assert [(m.span.field_name, m.span.start, m.span.end) for m in got] == manual
    for m in got:
        assert m.embedding is not None and 0.0 <= m.score <= 1.0


def test_head_independence():
    heads = [HeadParams.init(f"t{i}", dim=64, seed=10 + i) for i in range(3)]
    enc_all = multi_task_extract(corpus_doc(), heads, DecodeConfig(), Encoder())
    for head in heads:
        alone = multi_task_extract(corpus_doc(), [head], DecodeConfig(), Encoder())
        assert alone[head.entity_type] == enc_all[head.entity_type]


def test_multi_task_requires_heads():
    with pytest.raises(ExtractionError):
        multi_task_extract(corpus_doc(), [], DecodeConfig(), Encoder())


# -- training ---------------------------------------------------------------


def head_loss_oracle(V, y, W1, b1, w2, b2):
    """Independent scalar-formula loss (mean BCE of the MLP head)."""
    total = 0.0
    for v, target in zip(V, y):
        h = np.maximum(W1 @ v + b1, 0.0)
        z = float(h @ w2 + b2)
        p = 1.0 / (1.0 + math.exp(-z))
        p = min(max(p, 1e-12), 1 - 1e-12)
        total += -(target * math.log(p) + (1 - target) * math.log(1 - p))
    return total / len(y)


def toy_corpus():
    doc = Document("d", DocType.AD, "en", (Field("t", "aa bb"),))
    return [(doc, {"t": [1, 0]})]


def test_train_all_zero_labels_scores_below_half():
    doc = Document("d", DocType.AD, "en", (Field("t", "aa bb cc dd"),))
    corpus = [(doc, {"t": [0, 0, 0, 0]})]
    head, _ = train_head(corpus, "x", hidden=8, lr=0.5, epochs=300, seed=0)
    enc = Encoder().encode(doc)["t"]
    assert np.all(score_tokens(enc, head) < 0.5)


def test_one_step_matches_scalar_oracle():
    # run one epoch at lr 0.1 and reproduce the resulting loss by hand
    corpus = toy_corpus()
    encoder = Encoder()
    head1, loss1 = train_head(corpus, "x", encoder, hidden=2, lr=0.1, epochs=1, seed=7)

    enc = Encoder().encode(corpus[0][0])["t"]
    V, y = enc.vectors, np.array([1.0, 0.0])
    init = HeadParams.init("x", dim=64, hidden=2, seed=7)
    # scalar gradient step
    W1, b1, w2, b2 = init.W1.copy(), init.b1.copy(), init.w2.copy(), init.b2
    dW1 = np.zeros_like(W1)
    db1 = np.zeros_like(b1)
    dw2 = np.zeros_like(w2)
    db2 = 0.0
    n = len(y)
    for v, target in zip(V, y):
        z1 = W1 @ v + b1
        h = np.maximum(z1, 0.0)
        z = float(h @ w2 + b2)
        p = 1.0 / (1.0 + math.exp(-z))
        dz = (p - target) / n
        dw2 += dz * h
        db2 += dz
        dh = dz * w2
        dz1 = dh * (z1 > 0)
        dW1 += np.outer(dz1, v)
        db1 += dz1
    W1 -= 0.1 * dW1
    b1 -= 0.1 * db1
    w2 -= 0.1 * dw2
    b2 -= 0.1 * db2
    expected = head_loss_oracle(V, y, W1, b1, w2, b2)
    assert loss1 == pytest.approx(expected, rel=1e-12)
    assert np.allclose(head1.W1, W1) and head1.b2 == pytest.approx(b2)


def test_loss_non_increasing_small_lr():
    doc = Document("d", DocType.AD, "en", (Field("t", "red shoes blue coat"),))
    corpus = [(doc, {"t": [1, 1, 0, 0]})]
    losses = []
    for epochs in range(0, 40, 5):
        _, loss = train_head(corpus, "x", hidden=8, lr=1e-3, epochs=epochs, seed=2)
        losses.append(loss)
    assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))


def rel_err(a, b):
    """Relative error with an absolute floor for near-zero gradients."""
    return np.max(np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.ones_like(a)]))


def head_gradients_via_step(corpus, encoder, hidden, seed, lr=1.0):
    """Recover the full-batch gradient from one training step."""
    init = None
    trained, _ = train_head(corpus, "x", encoder, hidden=hidden, lr=lr, epochs=1, seed=seed)
    enc = Encoder().encode(corpus[0][0])["t"]
    init = HeadParams.init("x", dim=enc.vectors.shape[1], hidden=hidden, seed=seed)
    return {
        "W1": (init.W1 - trained.W1) / lr,
        "b1": (init.b1 - trained.b1) / lr,
        "w2": (init.w2 - trained.w2) / lr,
        "b2": np.array([(init.b2 - trained.b2) / lr]),
    }, init, enc


def test_head_gradient_finite_differences():
    eps = 1e-4
    doc = Document("d", DocType.AD, "en", (Field("t", "aa bb cc"),))
    corpus = [(doc, {"t": [1, 0, 1]})]
    grads, init, enc = head_gradients_via_step(corpus, Encoder(), hidden=3, seed=11)
    V, y = enc.vectors, np.array([1.0, 0.0, 1.0])

    def loss_at(W1, b1, w2, b2):
        return head_loss_oracle(V, y, W1, b1, w2, b2)

    worst = 0.0
    for name, arr in (("W1", init.W1), ("b1", init.b1), ("w2", init.w2)):
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            bump = np.zeros_like(arr)
            bump[idx] = eps
            kwargs = {"W1": init.W1, "b1": init.b1, "w2": init.w2, "b2": init.b2}
            up = dict(kwargs)
            up[name] = arr + bump
            down = dict(kwargs)
            down[name] = arr - bump
            fd[idx] = (loss_at(**up) - loss_at(**down)) / (2 * eps)
        worst = max(worst, float(rel_err(grads[name], fd)))
    fd_b2 = (
        loss_at(init.W1, init.b1, init.w2, init.b2 + eps)
        - loss_at(init.W1, init.b1, init.w2, init.b2 - eps)
    ) / (2 * eps)
    worst = max(worst, float(rel_err(grads["b2"], np.array([fd_b2]))))
    assert worst < 1e-4


def test_empty_corpus_rejected():
    with pytest.raises(ExtractionError):
        train_head([], "x")


def test_misaligned_labels_rejected():
    doc = Document("d", DocType.AD, "en", (Field("t", "aa bb"),))
    with pytest.raises(ExtractionError):
        train_head([(doc, {"t": [1, 0, 1]})], "x")


def test_heads_persistence_roundtrip(tmp_path):
    heads = [HeadParams.init("brand", dim=16, hidden=4, seed=1)]
    path = tmp_path / "heads.json"
    save_heads(heads, path, EncoderSpec(dim=16))
    loaded, spec = load_heads(path)
    assert spec.dim == 16
    assert loaded[0].entity_type == "brand"
    assert np.array_equal(loaded[0].W1, heads[0].W1)
