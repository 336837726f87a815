"""Score candidate mention-entity pairs and resolve each mention or NIL.

Entity embeddings are built offline by pooling the entity's description
text through the same encoder the mentions use. At scoring time the
mention embedding is projected and dotted with the candidate entity
embedding, and that similarity is combined with counter features (prior,
log count, extraction score) through a small feed-forward layer:

    f = [dot(Q m, e), mention_score, log(1 + count), prior]
    score = sigmoid(w2 . relu(f W1 + b1) + b2)

A mention resolves to its best-scoring candidate unless the best score
falls below the NIL threshold.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import Encoder, tokenize
from .mathutil import bce_from_logits, sigmoid
from .matching import CandidateMention

__all__ = [
    "EntityEmbedding",
    "LinkExample",
    "LinkerParams",
    "LinkingError",
    "Resolution",
    "embed_entities",
    "link_features",
    "load_entity_embeddings",
    "resolve",
    "save_entity_embeddings",
    "score_link",
    "train_linker",
]

N_FEATURES = 4
FFN_HIDDEN = 16
EMBEDDINGS_FORMAT_VERSION = "1"


class LinkingError(ValueError):
    pass


@dataclass(frozen=True)
class EntityEmbedding:
    entity_id: str
    vector: np.ndarray
    source_digest: str

    def __post_init__(self) -> None:
        norm = float(np.linalg.norm(self.vector))
        if norm != 0.0 and abs(norm - 1.0) > 1e-6:
            raise LinkingError(
                f"entity {self.entity_id}: embedding norm {norm} neither ~1 nor 0"
            )


def embed_entities(
    texts: dict[str, str], encoder: Encoder | None = None
) -> list[EntityEmbedding]:
    """Tokenize, encode, and mean-pool each entity's description text.

    Deterministic; an empty text yields the zero vector with a warning.
    """
    encoder = encoder or Encoder()
    out: list[EntityEmbedding] = []
    for entity_id in sorted(texts):
        text = texts[entity_id]
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        tokens = tokenize(text)
        if not tokens:
            warnings.warn(f"entity {entity_id} has empty text; zero vector", stacklevel=2)
            vec = np.zeros(encoder.dim)
        else:
            mat = np.vstack([encoder.token_vector(t.text) for t in tokens])
            vec = mat.mean(axis=0)
            norm = np.linalg.norm(vec)
            if norm > 0.0:
                vec = vec / norm
        out.append(EntityEmbedding(entity_id, vec, digest))
    return out


def save_entity_embeddings(embeddings: Sequence[EntityEmbedding], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": "entity_embeddings", "version": EMBEDDINGS_FORMAT_VERSION}
        if embeddings:
            header["dim"] = int(embeddings[0].vector.shape[0])
        fh.write(json.dumps(header) + "\n")
        for e in embeddings:
            fh.write(
                json.dumps(
                    {
                        "entity_id": e.entity_id,
                        "vector": e.vector.tolist(),
                        "digest": e.source_digest,
                    }
                )
                + "\n"
            )


def load_entity_embeddings(path: str | Path) -> dict[str, EntityEmbedding]:
    with open(path, encoding="utf-8") as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    if not lines:
        raise LinkingError(f"{path}: empty embeddings file")
    header = json.loads(lines[0])
    if header.get("format") != "entity_embeddings" or header.get("version") != EMBEDDINGS_FORMAT_VERSION:
        raise LinkingError(f"{path}: not a supported entity embeddings file")
    out: dict[str, EntityEmbedding] = {}
    for line in lines[1:]:
        obj = json.loads(line)
        emb = EntityEmbedding(
            obj["entity_id"], np.asarray(obj["vector"], dtype=np.float64), obj["digest"]
        )
        out[emb.entity_id] = emb
    return out


@dataclass
class LinkerParams:
    """Mention projection plus the feature feed-forward combiner.

    Shapes: Q is dim x dim, W1 is 4 x 16 (features by hidden), b1 and w2
    are 16, b2 scalar.
    """

    Q: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    nil_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.Q.ndim != 2 or self.Q.shape[0] != self.Q.shape[1]:
            raise LinkingError("Q must be square")
        if self.W1.shape != (N_FEATURES, FFN_HIDDEN):
            raise LinkingError(f"W1 must be {N_FEATURES} x {FFN_HIDDEN}")
        if self.b1.shape != (FFN_HIDDEN,) or self.w2.shape != (FFN_HIDDEN,):
            raise LinkingError("b1 and w2 must have the hidden width")
        for arr in (self.Q, self.W1, self.b1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise LinkingError("linker parameters must be finite")

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def init(cls, dim: int, seed: int = 0, nil_threshold: float = 0.5) -> "LinkerParams":
        rng = np.random.default_rng(seed)
        return cls(
            Q=np.eye(dim) + rng.normal(0.0, 0.01, size=(dim, dim)),
            W1=rng.uniform(-0.05, 0.05, size=(N_FEATURES, FFN_HIDDEN)),
            b1=rng.uniform(-0.05, 0.05, size=FFN_HIDDEN),
            w2=rng.uniform(-0.05, 0.05, size=FFN_HIDDEN),
            b2=float(rng.uniform(-0.05, 0.05)),
            nil_threshold=nil_threshold,
        )

    @classmethod
    def default(cls, dim: int, nil_threshold: float = 0.5) -> "LinkerParams":
        """Untrained but useful: score rises with similarity and prior."""
        W1 = np.zeros((N_FEATURES, FFN_HIDDEN))
        W1[0, 0] = 1.0   # similarity feature -> unit 0
        W1[3, 1] = 1.0   # prior feature -> unit 1
        b1 = np.zeros(FFN_HIDDEN)
        w2 = np.zeros(FFN_HIDDEN)
        w2[0] = 4.0
        w2[1] = 2.0
        return cls(Q=np.eye(dim), W1=W1, b1=b1, w2=w2, b2=-3.0, nil_threshold=nil_threshold)

    def to_dict(self) -> dict:
        return {
            "Q": self.Q.tolist(),
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
            "nil_threshold": self.nil_threshold,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LinkerParams":
        return cls(
            Q=np.asarray(obj["Q"], dtype=np.float64),
            W1=np.asarray(obj["W1"], dtype=np.float64),
            b1=np.asarray(obj["b1"], dtype=np.float64),
            w2=np.asarray(obj["w2"], dtype=np.float64),
            b2=float(obj["b2"]),
            nil_threshold=float(obj.get("nil_threshold", 0.5)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "LinkerParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def link_features(
    m: np.ndarray,
    e: np.ndarray,
    prior: float,
    count: int,
    mention_score: float,
    Q: np.ndarray,
) -> np.ndarray:
    return np.array(
        [float((Q @ m) @ e), mention_score, math.log1p(count), prior],
        dtype=np.float64,
    )


def _ffn_logit(f: np.ndarray, params: LinkerParams) -> float:
    hidden = np.maximum(f @ params.W1 + params.b1, 0.0)
    return float(hidden @ params.w2 + params.b2)


def score_link(
    m: np.ndarray,
    e: EntityEmbedding,
    prior: float,
    count: int,
    mention_score: float,
    params: LinkerParams,
) -> float:
    if m.shape[0] != params.dim or e.vector.shape[0] != params.dim:
        raise LinkingError("embedding dims do not match linker projection")
    f = link_features(m, e.vector, prior, count, mention_score, params.Q)
    return float(sigmoid(_ffn_logit(f, params)))


@dataclass(frozen=True)
class Resolution:
    entity_id: str | None  # None means NIL
    score: float
    candidate_scores: list[tuple[str, float]]


def resolve(
    mention: CandidateMention,
    m_emb: np.ndarray,
    embeddings: dict[str, EntityEmbedding],
    params: LinkerParams,
    mention_score: float = 0.0,
) -> Resolution:
    """Argmax over candidate scores, NIL below the threshold.

    Score ties break toward the higher prior, then the smaller entity id.
    Candidates without a stored embedding are skipped with a warning; if
    every candidate is skipped the mention resolves to NIL.
    """
    scored: list[tuple[float, float, str]] = []  # (score, prior, entity_id)
    candidate_scores: list[tuple[str, float]] = []
    for cand in mention.candidates:
        emb = embeddings.get(cand.entity_id)
        if emb is None:
            warnings.warn(
                f"no embedding for candidate {cand.entity_id}; skipped",
                stacklevel=2,
            )
            continue
        s = score_link(m_emb, emb, cand.prior, cand.count, mention_score, params)
        scored.append((s, cand.prior, cand.entity_id))
        candidate_scores.append((cand.entity_id, s))
    if not scored:
        return Resolution(None, 0.0, [])
    score, _, entity_id = min(scored, key=lambda t: (-t[0], -t[1], t[2]))
    if score < params.nil_threshold:
        return Resolution(None, score, candidate_scores)
    return Resolution(entity_id, score, candidate_scores)


@dataclass(frozen=True)
class LinkExample:
    """One training example: either fixed features or raw embedding pair.

    With raw embeddings the similarity feature is recomputed from Q each
    step and Q receives gradients.
    """

    label: bool
    weight: float = 1.0
    features: np.ndarray | None = None
    m_emb: np.ndarray | None = None
    e_emb: np.ndarray | None = None
    prior: float = 1.0
    count: int = 1
    mention_score: float = 0.0

    def __post_init__(self) -> None:
        if self.features is None and (self.m_emb is None or self.e_emb is None):
            raise LinkingError("example needs features or an embedding pair")


def train_linker(
    examples: Sequence[LinkExample],
    dim: int | None = None,
    lr: float = 0.1,
    epochs: int = 200,
    seed: int = 0,
    nil_threshold: float = 0.5,
) -> LinkerParams:
    """Weighted BCE, deterministic full-batch gradient descent.

    Positive weights are typically the salience (vote fraction) of the
    gold entity; negatives weigh 1. Loss is mean(weight * bce), so
    doubling all weights doubles the loss and gradient.
    """
    if not examples:
        raise LinkingError("no training examples")
    labels = {ex.label for ex in examples}
    if len(labels) < 2:
        raise LinkingError("training needs both positive and negative examples")
    if dim is None:
        for ex in examples:
            if ex.m_emb is not None:
                dim = ex.m_emb.shape[0]
                break
        else:
            dim = 1  # Q unused when every example has fixed features
    params = LinkerParams.init(dim, seed=seed, nil_threshold=nil_threshold)
    n = len(examples)
    for _ in range(epochs):
        dQ = np.zeros_like(params.Q)
        dW1 = np.zeros_like(params.W1)
        db1 = np.zeros_like(params.b1)
        dw2 = np.zeros_like(params.w2)
        db2 = 0.0
        train_q = False
        for ex in examples:
            if ex.features is not None:
                f = ex.features
            else:
                f = link_features(
                    ex.m_emb, ex.e_emb, ex.prior, ex.count, ex.mention_score, params.Q
                )
            z1 = f @ params.W1 + params.b1
            h = np.maximum(z1, 0.0)
            logit = float(h @ params.w2 + params.b2)
            p = float(sigmoid(logit))
            dlogit = ex.weight * (p - float(ex.label)) / n
            dw2 += dlogit * h
            db2 += dlogit
            dh = dlogit * params.w2
            dz1 = dh * (z1 > 0.0)
            dW1 += np.outer(f, dz1)
            db1 += dz1
            if ex.features is None:
                df = dz1 @ params.W1.T
                dQ += df[0] * np.outer(ex.e_emb, ex.m_emb)
                train_q = True
        params.W1 -= lr * dW1
        params.b1 -= lr * db1
        params.w2 -= lr * dw2
        params.b2 -= lr * db2
        if train_q:
            params.Q -= lr * dQ
    return params


def linker_loss(examples: Sequence[LinkExample], params: LinkerParams) -> float:
    """Mean weighted BCE of the linker on ``examples``."""
    total = 0.0
    for ex in examples:
        if ex.features is not None:
            f = ex.features
        else:
            f = link_features(
                ex.m_emb, ex.e_emb, ex.prior, ex.count, ex.mention_score, params.Q
            )
        logit = _ffn_logit(f, params)
        total += ex.weight * float(
            bce_from_logits(np.array(logit), np.array(float(ex.label)))
        )
    return total / len(examples)
