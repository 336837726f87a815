"""Tokenization and deterministic per-token embeddings.

The reference embedder stands in for a pretrained multilingual encoder: it
hashes boundary-padded character n-grams of each token into a fixed-width
signed bag, then L2-normalizes. Hashing is FNV-1a (64-bit) over the UTF-8
bytes of each n-gram, so vectors are bit-identical across runs, platforms,
and implementations:

    h     = FNV-1a-64(utf8(gram))
    index = h mod dim
    sign  = +1 if the top bit of h is 0 else -1

An ``external`` encoder kind loads precomputed per-token vectors from a
JSONL file instead, for users who bring a real model. Encoding a document
bumps an invocation counter exactly once no matter how many downstream
heads consume the result; the counter is safe to increment from parallel
workers.
"""

from __future__ import annotations

import json
import threading
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .documents import Document, Span

__all__ = [
    "Encoder",
    "EncoderError",
    "EncoderSpec",
    "Token",
    "TokenEncoding",
    "fnv1a_64",
    "ngram_vector",
    "pool",
    "tokenize",
]

_NORM_TOL = 1e-6

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOP_BIT = 1 << 63


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    field_name: str
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class TokenEncoding:
    """Tokens of one field plus their embedding matrix (one row per token)."""

    tokens: list[Token]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.vectors.shape[0] != len(self.tokens):
            raise EncoderError(
                f"{self.vectors.shape[0]} vector rows for {len(self.tokens)} tokens"
            )


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "reference_ngram"
    dim: int = 64
    ngram_n: int = 3
    vectors_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("reference_ngram", "external"):
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 8:
            raise EncoderError("encoder dim must be >= 8")
        if self.ngram_n < 1:
            raise EncoderError("ngram_n must be positive")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "ngram_n": self.ngram_n}
        if self.vectors_path:
            out["vectors_path"] = self.vectors_path
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderSpec":
        return cls(
            kind=obj.get("kind", "reference_ngram"),
            dim=obj.get("dim", 64),
            ngram_n=obj.get("ngram_n", 3),
            vectors_path=obj.get("vectors_path"),
        )


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str, field_name: str = "") -> list[Token]:
    """Split on Unicode whitespace; edge punctuation becomes single-char tokens.

    Punctuation strictly inside a chunk ("don't", "u.s") stays attached.
    Offsets cover the source exactly except whitespace.
    """
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        a, b = i, j
        while a < b and _is_punct(text[a]):
            tokens.append(Token(field_name, a, a + 1, text[a]))
            a += 1
        trailing: list[Token] = []
        while b > a and _is_punct(text[b - 1]):
            trailing.append(Token(field_name, b - 1, b, text[b - 1]))
            b -= 1
        if a < b:
            tokens.append(Token(field_name, a, b, text[a:b]))
        tokens.extend(reversed(trailing))
        i = j
    return tokens


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def ngram_vector(text: str, dim: int = 64, n: int = 3) -> np.ndarray:
    """Signed-hash bag of character n-grams of ``"#" + text + "#"``, L2-normalized.

    Pure function of its arguments; tokens shorter than ``n - 2`` characters
    yield no n-grams and map to the zero vector.
    """
    padded = "#" + text + "#"
    vec = np.zeros(dim, dtype=np.float64)
    for k in range(len(padded) - n + 1):
        h = fnv1a_64(padded[k : k + n].encode("utf-8"))
        sign = 1.0 if h & _TOP_BIT == 0 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


class _Counter:
    """Thread-safe monotone counter."""

    __slots__ = ("_lock", "_value")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value = 0

    def increment(self) -> None:
        with self._lock:
            self._value += 1

    @property
    def value(self) -> int:
        with self._lock:
            return self._value


class Encoder:
    """Per-field token encoder with an invocation counter.

    ``encode`` is a pure function of the document text and the spec; the
    counter is the only mutable state.
    """

    def __init__(self, spec: EncoderSpec | None = None) -> None:
        self.spec = spec or EncoderSpec()
        self._invocations = _Counter()
        self._external: dict[tuple[str, str], list[list[float]]] | None = None
        if self.spec.kind == "external":
            if not self.spec.vectors_path:
                raise EncoderError("external encoder requires vectors_path")
            self._external = _load_external_vectors(self.spec.vectors_path)

    @property
    def invocations(self) -> int:
        return self._invocations.value

    @property
    def dim(self) -> int:
        return self.spec.dim

    def token_vector(self, text: str) -> np.ndarray:
        return ngram_vector(text, self.spec.dim, self.spec.ngram_n)

    def encode(self, doc: Document) -> dict[str, TokenEncoding]:
        """Encode every field of ``doc``; counts as one invocation."""
        self._invocations.increment()
        out: dict[str, TokenEncoding] = {}
        for field in doc.fields:
            tokens = tokenize(field.text, field.name)
            if self.spec.kind == "reference_ngram":
                vectors = np.empty((len(tokens), self.spec.dim), dtype=np.float64)
                for i, tok in enumerate(tokens):
                    vectors[i] = self.token_vector(tok.text)
            else:
                vectors = self._external_vectors(doc.id, field.name, len(tokens))
            out[field.name] = TokenEncoding(tokens, vectors)
        return out

    def _external_vectors(
        self, doc_id: str, field_name: str, n_tokens: int
    ) -> np.ndarray:
        assert self._external is not None
        rows = self._external.get((doc_id, field_name))
        if rows is None or len(rows) != n_tokens:
            raise EncoderError(
                f"no external vectors for document {doc_id!r} field {field_name!r} "
                f"({n_tokens} tokens expected)"
            )
        return np.asarray(rows, dtype=np.float64)


def _load_external_vectors(path: str | Path) -> dict[tuple[str, str], list[list[float]]]:
    table: dict[tuple[str, str], dict[int, list[float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (obj["doc_id"], obj["field"])
                table.setdefault(key, {})[obj["token_index"]] = obj["vector"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise EncoderError(f"{path}:{lineno}: {exc}") from exc
    out: dict[tuple[str, str], list[list[float]]] = {}
    for key, by_index in table.items():
        if sorted(by_index) != list(range(len(by_index))):
            raise EncoderError(f"non-contiguous token indices for {key}")
        out[key] = [by_index[i] for i in range(len(by_index))]
    return out


def pool(encoding: TokenEncoding, span: Span) -> np.ndarray:
    """Mean of vectors of tokens overlapping the span, L2-normalized.

    Raises ``EncoderError`` if the span overlaps no token. The zero vector
    is returned when the mean itself is zero.
    """
    rows = [
        i
        for i, tok in enumerate(encoding.tokens)
        if tok.start < span.end and tok.end > span.start
    ]
    if not rows:
        raise EncoderError(
            f"span ({span.start}, {span.end}) overlaps no token in field "
            f"{span.field_name!r}"
        )
    mean = encoding.vectors[rows].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0.0:
        mean = mean / norm
    return mean
