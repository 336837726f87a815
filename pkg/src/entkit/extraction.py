"""Per-token mention extraction heads over a shared encoding.

Each entity type gets its own small MLP head scoring every token; spans
come out of the scores by taking maximal runs of consecutive tokens above
a threshold ("continuous positive blocks"). Running several heads over
one document encodes the document exactly once, because encoding
dominates inference cost.

Heads train with deterministic full-batch gradient descent on mean binary
cross-entropy; reproducibility beats speed at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .documents import Document, Mention, Span
from .encoder import Encoder, EncoderSpec, Token, TokenEncoding, pool
from .mathutil import bce_from_logits, sigmoid

__all__ = [
    "DecodeConfig",
    "ExtractionError",
    "HeadParams",
    "decode_spans",
    "load_heads",
    "multi_task_extract",
    "save_heads",
    "score_tokens",
    "train_head",
]

HIDDEN = 128


class ExtractionError(ValueError):
    pass


@dataclass
class HeadParams:
    """One-hidden-layer MLP head for one entity type.

    ``W1`` is hidden x dim; scores are sigmoid(w2 . relu(W1 v + b1) + b2)
    per token vector v.
    """

    entity_type: str
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self) -> None:
        hidden, dim = self.W1.shape
        if self.b1.shape != (hidden,) or self.w2.shape != (hidden,):
            raise ExtractionError("head parameter shapes are inconsistent")
        for arr in (self.W1, self.b1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise ExtractionError("head parameters must be finite")
        if not np.isfinite(self.b2):
            raise ExtractionError("head parameters must be finite")

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(
        cls, entity_type: str, dim: int, hidden: int = HIDDEN, seed: int = 0
    ) -> "HeadParams":
        rng = np.random.default_rng(seed)
        return cls(
            entity_type=entity_type,
            W1=rng.uniform(-0.05, 0.05, size=(hidden, dim)),
            b1=rng.uniform(-0.05, 0.05, size=hidden),
            w2=rng.uniform(-0.05, 0.05, size=hidden),
            b2=float(rng.uniform(-0.05, 0.05)),
        )

    def to_dict(self, encoder_spec: EncoderSpec | None = None) -> dict:
        out = {
            "entity_type": self.entity_type,
            "dims": {"dim": self.dim, "hidden": self.hidden},
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
        }
        if encoder_spec is not None:
            out["encoder_spec"] = encoder_spec.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "HeadParams":
        return cls(
            entity_type=obj["entity_type"],
            W1=np.asarray(obj["W1"], dtype=np.float64),
            b1=np.asarray(obj["b1"], dtype=np.float64),
            w2=np.asarray(obj["w2"], dtype=np.float64),
            b2=float(obj["b2"]),
        )


def save_heads(
    heads: Sequence[HeadParams],
    path: str | Path,
    encoder_spec: EncoderSpec | None = None,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([h.to_dict(encoder_spec) for h in heads], fh)


def load_heads(path: str | Path) -> tuple[list[HeadParams], EncoderSpec]:
    with open(path, encoding="utf-8") as fh:
        objs = json.load(fh)
    if isinstance(objs, dict):
        objs = [objs]
    if not objs:
        raise ExtractionError(f"{path}: no heads")
    heads = [HeadParams.from_dict(o) for o in objs]
    spec_obj = objs[0].get("encoder_spec")
    spec = EncoderSpec.from_dict(spec_obj) if spec_obj else EncoderSpec()
    return heads, spec


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    min_tokens: int = 1
    max_tokens: int = 16

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ExtractionError("threshold must lie in (0, 1)")
        if self.min_tokens < 1 or self.min_tokens > self.max_tokens:
            raise ExtractionError("need 1 <= min_tokens <= max_tokens")


def _forward(vectors: np.ndarray, head: HeadParams) -> np.ndarray:
    z1 = vectors @ head.W1.T + head.b1
    return np.maximum(z1, 0.0) @ head.w2 + head.b2


def score_tokens(encoding: TokenEncoding, head: HeadParams) -> np.ndarray:
    """Per-token probabilities, aligned with ``encoding.tokens``."""
    if encoding.vectors.shape[1] != head.dim:
        raise ExtractionError(
            f"encoder dim {encoding.vectors.shape[1]} != head dim {head.dim}"
        )
    if not encoding.tokens:
        return np.zeros(0, dtype=np.float64)
    return sigmoid(_forward(encoding.vectors, head))


def decode_spans(
    scores: np.ndarray, tokens: Sequence[Token], cfg: DecodeConfig | None = None
) -> list[Span]:
    """Maximal runs of consecutive tokens scoring above the threshold.

    Each qualifying run becomes one span from its first token's start to
    its last token's end. Runs outside [min_tokens, max_tokens] are
    dropped, and runs never cross field boundaries.
    """
    cfg = cfg or DecodeConfig()
    if len(scores) != len(tokens):
        raise ExtractionError(f"{len(scores)} scores for {len(tokens)} tokens")
    if len(tokens) == 0:
        return []
    positive = np.asarray(scores) > cfg.threshold
    idx = np.flatnonzero(positive)
    if idx.size == 0:
        return []
    spans: list[Span] = []
    run_start = idx[0]
    prev = idx[0]
    boundaries: list[tuple[int, int]] = []
    for i in idx[1:]:
        if i != prev + 1 or tokens[i].field_name != tokens[prev].field_name:
            boundaries.append((run_start, prev))
            run_start = i
        prev = i
    boundaries.append((run_start, prev))
    for first, last in boundaries:
        length = last - first + 1
        if length < cfg.min_tokens or length > cfg.max_tokens:
            continue
        spans.append(
            Span(tokens[first].field_name, tokens[first].start, tokens[last].end)
        )
    return spans


def multi_task_extract(
    doc: Document,
    heads: Sequence[HeadParams],
    cfg: DecodeConfig | None = None,
    encoder: Encoder | None = None,
) -> dict[str, list[Mention]]:
    """Run every head over one shared encoding of ``doc``.

    The encoder is invoked exactly once per document regardless of the
    number of heads. Each mention carries its pooled embedding and its
    mean token probability as the extraction score.
    """
    if not heads:
        raise ExtractionError("need at least one head")
    cfg = cfg or DecodeConfig()
    encoder = encoder or Encoder()
    encodings = encoder.encode(doc)
    out: dict[str, list[Mention]] = {}
    for head in heads:
        mentions: list[Mention] = []
        for field in doc.fields:
            encoding = encodings[field.name]
            if not encoding.tokens:
                continue
            scores = score_tokens(encoding, head)
            for span in decode_spans(scores, encoding.tokens, cfg):
                member = [
                    i
                    for i, tok in enumerate(encoding.tokens)
                    if tok.start >= span.start and tok.end <= span.end
                ]
                mentions.append(
                    Mention(
                        doc_id=doc.id,
                        span=span,
                        surface=field.text[span.start : span.end],
                        embedding=pool(encoding, span),
                        score=float(np.mean(scores[member])),
                    )
                )
        out[head.entity_type] = mentions
    return out


def _collect_training_matrix(
    corpus: Iterable[tuple[Document, dict[str, Sequence[int]]]],
    encoder: Encoder,
) -> tuple[np.ndarray, np.ndarray]:
    vecs: list[np.ndarray] = []
    labels: list[int] = []
    n_docs = 0
    for doc, gold in corpus:
        n_docs += 1
        encodings = encoder.encode(doc)
        for field in doc.fields:
            encoding = encodings[field.name]
            field_labels = gold.get(field.name, [0] * len(encoding.tokens))
            if len(field_labels) != len(encoding.tokens):
                raise ExtractionError(
                    f"document {doc.id!r} field {field.name!r}: "
                    f"{len(field_labels)} labels for {len(encoding.tokens)} tokens"
                )
            if encoding.tokens:
                vecs.append(encoding.vectors)
                labels.extend(int(v) for v in field_labels)
    if n_docs == 0 or not vecs:
        raise ExtractionError("training corpus is empty")
    return np.vstack(vecs), np.asarray(labels, dtype=np.float64)


def train_head(
    corpus: Iterable[tuple[Document, dict[str, Sequence[int]]]],
    entity_type: str,
    encoder: Encoder | None = None,
    hidden: int = HIDDEN,
    lr: float = 0.1,
    epochs: int = 100,
    seed: int = 0,
) -> tuple[HeadParams, float]:
    """Full-batch gradient descent on mean token BCE; deterministic given seed.

    Gold labels are per-field binary vectors aligned with the tokenizer.
    Returns the trained head and the final loss.
    """
    encoder = encoder or Encoder()
    V, y = _collect_training_matrix(corpus, encoder)
    head = HeadParams.init(entity_type, dim=V.shape[1], hidden=hidden, seed=seed)
    n = len(y)
    loss = float(np.mean(bce_from_logits(_forward(V, head), y)))
    for _ in range(epochs):
        z1 = V @ head.W1.T + head.b1
        h = np.maximum(z1, 0.0)
        logits = h @ head.w2 + head.b2
        p = sigmoid(logits)
        dlogits = (p - y) / n
        dw2 = h.T @ dlogits
        db2 = float(np.sum(dlogits))
        dh = np.outer(dlogits, head.w2)
        dz1 = dh * (z1 > 0.0)
        dW1 = dz1.T @ V
        db1 = dz1.sum(axis=0)
        head.W1 -= lr * dW1
        head.b1 -= lr * db1
        head.w2 -= lr * dw2
        head.b2 -= lr * db2
        loss = float(np.mean(bce_from_logits(_forward(V, head), y)))
    return head, loss
