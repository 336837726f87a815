"""Dictionary-alias matching over documents.

Aliases are matched against the normalized form of each field, and every
occurrence that lines up with token boundaries in the original text is
emitted with its candidate entity list. The token-boundary rule is what
keeps "art" from matching inside "start"; it also means a match can only
begin where a token begins, so the scanner anchors a prefix-trie walk at
each token-aligned position of the normalized text instead of stepping
through every character. Build time is linear in total alias length and
walks are bounded by the longest alias.

Overlap policy: at one left edge only the longest occurrence survives
(leftmost-longest); occurrences with distinct left edges are all kept,
so "Joe Biden" and the inner "Biden" both come through.
"""

from __future__ import annotations

from dataclasses import dataclass

from .documents import Document, Span, document_to_dict
from .encoder import tokenize
from .kb_dictionary import AliasTable, Candidate
from .textnorm import NormalizedText, normalize_with_map

__all__ = [
    "CandidateMention",
    "CompiledMatcher",
    "MatchingError",
    "candidates_to_tasks",
    "compile_matcher",
    "find_candidates",
]


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateMention:
    """An alias occurrence with its candidate entities, sorted by prior."""

    mention_id: str
    span: Span
    surface: str
    candidates: list[Candidate]

    def __post_init__(self) -> None:
        if not self.candidates:
            raise MatchingError(f"mention {self.mention_id} has no candidates")


class CompiledMatcher:
    """Immutable multi-pattern automaton over normalized alias strings.

    The trie is a flat list of char -> child dicts with a parallel list of
    accepting alias keys, built once from an alias table.
    """

    def __init__(self, table: AliasTable) -> None:
        if not table.entries:
            raise MatchingError("cannot compile an empty alias table")
        self.table = table
        children: list[dict[str, int]] = [{}]
        accept: list[str | None] = [None]
        max_len = 0
        for alias in table.entries:
            node = 0
            for ch in alias:
                nxt = children[node].get(ch)
                if nxt is None:
                    nxt = len(children)
                    children[node][ch] = nxt
                    children.append({})
                    accept.append(None)
                node = nxt
            accept[node] = alias
            max_len = max(max_len, len(alias))
        self._children = children
        self._accept = accept
        self.max_alias_len = max_len

    def scan(self, nt: NormalizedText, starts: list[int], ends: set[int]) -> list[tuple[int, int, str]]:
        """All alias occurrences beginning at a valid start and ending at a valid end.

        Returns (norm_start, norm_end, alias) triples.
        """
        children = self._children
        accept = self._accept
        text = nt.text
        n = len(text)
        out: list[tuple[int, int, str]] = []
        for js in starts:
            node = 0
            j = js
            limit = min(n, js + self.max_alias_len)
            while True:
                alias = accept[node]
                if alias is not None and j in ends:
                    out.append((js, j, alias))
                if j >= limit:
                    break
                node = children[node].get(text[j], -1)
                if node < 0:
                    break
                j += 1
        return out


def compile_matcher(table: AliasTable) -> CompiledMatcher:
    return CompiledMatcher(table)


def _boundary_sets(text: str, nt: NormalizedText) -> tuple[list[int], set[int]]:
    """Normalized positions that map onto original token starts / ends."""
    tokens = tokenize(text)
    token_starts = {t.start for t in tokens}
    token_ends = {t.end for t in tokens}
    starts: list[int] = []
    ends: set[int] = set()
    origins = nt.origins
    for j in range(len(origins)):
        if nt.is_boundary(j) and origins[j] in token_starts:
            starts.append(j)
        if nt.is_boundary(j + 1) and origins[j] + 1 in token_ends:
            ends.add(j + 1)
    return starts, ends


def find_candidates(
    doc: Document,
    matcher: CompiledMatcher,
    overlap: str = "leftmost_longest",
) -> list[CandidateMention]:
    """Every token-aligned alias occurrence in every field of ``doc``.

    Offsets are reported in original-text coordinates. ``overlap`` is
    either ``leftmost_longest`` (default, suppresses occurrences strictly
    contained at the same left edge) or ``all``.
    """
    if overlap not in ("leftmost_longest", "all"):
        raise MatchingError(f"unknown overlap policy {overlap!r}")
    mentions: list[CandidateMention] = []
    for field in doc.fields:
        nt = normalize_with_map(field.text)
        if not nt.text:
            continue
        starts, ends = _boundary_sets(field.text, nt)
        hits = matcher.scan(nt, starts, ends)
        if overlap == "leftmost_longest":
            longest: dict[int, tuple[int, str]] = {}
            for js, je, alias in hits:
                best = longest.get(js)
                if best is None or je > best[0]:
                    longest[js] = (je, alias)
            hits = [(js, je, alias) for js, (je, alias) in longest.items()]
        for js, je, alias in sorted(hits):
            o_start, o_end = nt.source_span(js, je)
            span = Span(field.name, o_start, o_end)
            mentions.append(
                CandidateMention(
                    mention_id=f"{doc.id}:{field.name}:{o_start}-{o_end}",
                    span=span,
                    surface=field.text[o_start:o_end],
                    candidates=list(matcher.table.entries[alias]),
                )
            )
    return mentions


def candidates_to_tasks(mentions: list[CandidateMention], doc: Document) -> dict:
    """Package candidate mentions into a closed-world labeling task payload.

    Each mention offers its candidates (sorted by prior) plus an explicit
    "none of these" choice; tasks with no mentions are marked
    auto-skippable. Mention order is preserved.
    """
    payload_mentions = []
    for m in mentions:
        choices = [
            {
                "entity_id": c.entity_id,
                "title": c.entity_title,
                "prior": c.prior,
                "count": c.count,
            }
            for c in m.candidates
        ]
        choices.append({"entity_id": None, "title": "none of these"})
        payload_mentions.append(
            {
                "mention_id": m.mention_id,
                "field": m.span.field_name,
                "start": m.span.start,
                "end": m.span.end,
                "surface": m.surface,
                "choices": choices,
            }
        )
    return {
        "kind": "closed_world",
        "document": document_to_dict(doc),
        "mentions": payload_mentions,
        "auto_skippable": not mentions,
    }
