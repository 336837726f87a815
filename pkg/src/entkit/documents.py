"""Canonical document, span, and mention types plus JSONL ingestion.

Documents arrive pre-fielded: each is an ordered list of named text fields
(title, description, ...). Categorical metadata travels as extra fields
whose text is the category value, which keeps the encoder interface
uniform. All character offsets count Unicode scalar values.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "CorpusError",
    "DocType",
    "Document",
    "Field",
    "Mention",
    "Span",
    "document_from_dict",
    "document_to_dict",
    "load_documents",
    "load_mentions",
    "mention_to_dict",
    "save_documents",
    "save_mentions",
    "validate_span",
]

_LANGUAGE_RE = re.compile(r"^[a-z]{2,3}(-[a-z0-9]{1,8})*$")

_NORM_TOL = 1e-6


class CorpusError(ValueError):
    """Raised when a corpus file or one of its records is invalid."""


class DocType(str, Enum):
    AD = "ad"
    WEB_PAGE = "web_page"
    UGC = "ugc"


@dataclass(frozen=True)
class Field:
    name: str
    text: str

    def __post_init__(self) -> None:
        if not self.name:
            raise CorpusError("field name must be non-empty")


@dataclass(frozen=True)
class Span:
    """Character range within one document field; end is exclusive."""

    field_name: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.start >= self.end:
            raise CorpusError(
                f"span ({self.start}, {self.end}) must satisfy 0 <= start < end"
            )

    def as_tuple(self) -> tuple[str, int, int]:
        return (self.field_name, self.start, self.end)


@dataclass(frozen=True)
class Document:
    id: str
    doc_type: DocType
    language: str
    fields: tuple[Field, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if not isinstance(self.doc_type, DocType):
            object.__setattr__(self, "doc_type", DocType(self.doc_type))
        if not _LANGUAGE_RE.match(self.language):
            raise CorpusError(f"invalid language code {self.language!r}")
        if not self.fields:
            raise CorpusError(f"document {self.id!r} has no fields")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise CorpusError(f"document {self.id!r} has duplicate field names")

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise CorpusError(f"document {self.id!r} has no field {name!r}")

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]


@dataclass(frozen=True, eq=False)
class Mention:
    """A span of text referring to an entity, with an optional pooled embedding."""

    doc_id: str
    span: Span
    surface: str
    embedding: np.ndarray | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if norm != 0.0 and abs(norm - 1.0) > _NORM_TOL:
                raise CorpusError(
                    f"mention embedding norm {norm} is neither ~1 nor 0"
                )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mention):
            return NotImplemented
        if (self.embedding is None) != (other.embedding is None):
            return False
        if self.embedding is not None and not np.array_equal(
            self.embedding, other.embedding
        ):
            return False
        return (
            self.doc_id == other.doc_id
            and self.span == other.span
            and self.surface == other.surface
            and self.score == other.score
        )


def validate_span(doc: Document, span: Span) -> str:
    """Return the substring covered by ``span``, or raise ``CorpusError``."""
    text = doc.field(span.field_name).text
    if span.end > len(text):
        raise CorpusError(
            f"span end {span.end} exceeds field {span.field_name!r} "
            f"length {len(text)} in document {doc.id!r}"
        )
    return text[span.start : span.end]


def document_from_dict(obj: dict) -> Document:
    try:
        fields = tuple(Field(f["name"], f["text"]) for f in obj["fields"])
        return Document(
            id=obj["id"],
            doc_type=DocType(obj["doc_type"]),
            language=obj["language"],
            fields=fields,
        )
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"document record missing or malformed key: {exc}") from exc
    except ValueError as exc:
        raise CorpusError(str(exc)) from exc


def document_to_dict(doc: Document) -> dict:
    return {
        "id": doc.id,
        "doc_type": doc.doc_type.value,
        "language": doc.language,
        "fields": [{"name": f.name, "text": f.text} for f in doc.fields],
    }


def load_documents(path: str | Path) -> list[Document]:
    """Load a JSONL corpus, one document object per line.

    Raises ``CorpusError`` naming the offending line on malformed JSON,
    invalid documents, or duplicate ids (both lines are named).
    """
    docs: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                doc = document_from_dict(obj)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if doc.id in seen:
                raise CorpusError(
                    f"{path}: duplicate document id {doc.id!r} "
                    f"on lines {seen[doc.id]} and {lineno}"
                )
            seen[doc.id] = lineno
            docs.append(doc)
    return docs


def save_documents(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_dict(doc), ensure_ascii=False) + "\n")


def mention_to_dict(m: Mention) -> dict:
    return {
        "doc_id": m.doc_id,
        "field": m.span.field_name,
        "start": m.span.start,
        "end": m.span.end,
        "surface": m.surface,
    }


def load_mentions(
    path: str | Path, docs: dict[str, Document] | None = None
) -> list[Mention]:
    """Load mentions JSONL; when ``docs`` is given, surfaces are re-validated."""
    mentions: list[Mention] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                span = Span(obj["field"], obj["start"], obj["end"])
                mention = Mention(obj["doc_id"], span, obj["surface"])
            except (json.JSONDecodeError, KeyError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if docs is not None:
                doc = docs.get(mention.doc_id)
                if doc is None:
                    raise CorpusError(
                        f"{path}:{lineno}: unknown document {mention.doc_id!r}"
                    )
                actual = validate_span(doc, span)
                if actual != mention.surface:
                    raise CorpusError(
                        f"{path}:{lineno}: surface {mention.surface!r} does not "
                        f"match document text {actual!r}"
                    )
            mentions.append(mention)
    return mentions


def save_mentions(mentions: Iterable[Mention], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in mentions:
            fh.write(json.dumps(mention_to_dict(m), ensure_ascii=False) + "\n")
