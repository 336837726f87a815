"""Turn multiple raters' labels into gold data.

Span labels aggregate at the token level: a token survives when at least
threshold raters highlighted it (And = all, Or = any, Majority = strict
majority, k-of-n = custom), and surviving tokens re-form spans as maximal
runs. A span's vote count is the minimum over its tokens, the
conservative reading. Choice labels aggregate per (mention, entity) with
a k-of-n threshold; multiple passing entities collapse to the
highest-voted one, ties broken by prior.

Raters often miss repeated occurrences of a surface they selected, so
gold spans are broadcast back to every other token-aligned occurrence in
the document. Calibration compares a rater against expert answers on
covertly injected golden tasks and against the consensus of their peers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Mapping, Sequence

from .documents import Document, Span, validate_span
from .encoder import tokenize
from .textnorm import normalize_text, normalize_with_map

__all__ = [
    "CalibrationReport",
    "ConsensusConfig",
    "GoldChoice",
    "GoldLabel",
    "GoldSpan",
    "LabelingError",
    "PRF",
    "RaterChoiceLabel",
    "RaterSpanLabel",
    "aggregate_choices",
    "aggregate_spans",
    "broadcast_mentions",
    "exact_match_f1",
    "rater_calibration",
]


class LabelingError(ValueError):
    pass


def merge_overlapping_spans(spans: Sequence[Span]) -> list[Span]:
    """Merge overlapping spans within each field; warns when merging."""
    by_field: dict[str, list[Span]] = {}
    for s in spans:
        by_field.setdefault(s.field_name, []).append(s)
    out: list[Span] = []
    merged_any = False
    for field_name in by_field:
        ordered = sorted(by_field[field_name], key=lambda s: (s.start, s.end))
        current = ordered[0]
        for s in ordered[1:]:
            if s.start < current.end:
                merged_any = True
                if s.end > current.end:
                    current = Span(field_name, current.start, s.end)
            else:
                out.append(current)
                current = s
        out.append(current)
    if merged_any:
        warnings.warn("overlapping rater spans merged at ingest", stacklevel=3)
    return sorted(out, key=lambda s: (s.field_name, s.start))


@dataclass
class RaterSpanLabel:
    """One rater's highlighted spans for one open-world task."""

    task_id: str
    rater_id: str
    spans: list[Span]

    def __post_init__(self) -> None:
        self.spans = merge_overlapping_spans(self.spans) if self.spans else []


@dataclass(frozen=True)
class Selection:
    mention_id: str
    entity_id: str | None  # None encodes "none of these"


@dataclass
class RaterChoiceLabel:
    """One rater's entity selections for one closed-world task."""

    task_id: str
    rater_id: str
    selections: list[Selection]

    def __post_init__(self) -> None:
        mention_ids = [s.mention_id for s in self.selections]
        if len(set(mention_ids)) != len(mention_ids):
            raise LabelingError(
                f"rater {self.rater_id} selected one mention more than once"
            )


@dataclass(frozen=True)
class ConsensusConfig:
    method: str = "majority"  # and | or | majority | k_of_n
    expected_raters: int = 3
    k: int | None = None

    def __post_init__(self) -> None:
        if self.method not in ("and", "or", "majority", "k_of_n"):
            raise LabelingError(f"unknown consensus method {self.method!r}")
        if self.expected_raters < 1:
            raise LabelingError("expected_raters must be positive")
        if self.method == "k_of_n":
            if self.k is None or not 1 <= self.k <= self.expected_raters:
                raise LabelingError("k_of_n needs 1 <= k <= expected_raters")

    @property
    def threshold(self) -> int:
        if self.method == "and":
            return self.expected_raters
        if self.method == "or":
            return 1
        if self.method == "majority":
            return self.expected_raters // 2 + 1
        return self.k  # type: ignore[return-value]


@dataclass(frozen=True)
class GoldSpan:
    span: Span
    vote_count: int
    salience: float


@dataclass(frozen=True)
class GoldChoice:
    mention_id: str
    entity_id: str
    vote_count: int
    salience: float


@dataclass
class GoldLabel:
    task_id: str
    expected_raters: int
    spans: list[GoldSpan] = dc_field(default_factory=list)
    choices: list[GoldChoice] = dc_field(default_factory=list)


def _check_labels(labels: Sequence, cfg: ConsensusConfig) -> None:
    if not labels:
        raise LabelingError("no rater labels")
    task_ids = {l.task_id for l in labels}
    if len(task_ids) != 1:
        raise LabelingError(f"labels span multiple tasks: {sorted(task_ids)}")
    raters = [l.rater_id for l in labels]
    if len(set(raters)) != len(raters):
        raise LabelingError("duplicate rater labels for one task")
    if len(raters) > cfg.expected_raters:
        raise LabelingError(
            f"{len(raters)} raters exceed expected_raters={cfg.expected_raters}"
        )


def aggregate_spans(
    labels: Sequence[RaterSpanLabel], cfg: ConsensusConfig, doc: Document
) -> GoldLabel:
    """Token-level consensus over rater highlights.

    A token counts as highlighted by a rater when any of that rater's
    spans overlaps it. Tokens reaching the threshold re-form spans as
    maximal runs; each span's vote count is the minimum over its tokens
    and its salience is vote_count / expected_raters.
    """
    _check_labels(labels, cfg)
    for label in labels:
        for span in label.spans:
            validate_span(doc, span)
    gold_spans: list[GoldSpan] = []
    for field in doc.fields:
        tokens = tokenize(field.text, field.name)
        if not tokens:
            continue
        votes = [0] * len(tokens)
        for label in labels:
            for i, tok in enumerate(tokens):
                if any(
                    s.field_name == field.name
                    and s.start < tok.end
                    and s.end > tok.start
                    for s in label.spans
                ):
                    votes[i] += 1
        threshold = cfg.threshold
        i = 0
        while i < len(tokens):
            if votes[i] < threshold:
                i += 1
                continue
            j = i
            while j + 1 < len(tokens) and votes[j + 1] >= threshold:
                j += 1
            vote_count = min(votes[i : j + 1])
            gold_spans.append(
                GoldSpan(
                    span=Span(field.name, tokens[i].start, tokens[j].end),
                    vote_count=vote_count,
                    salience=vote_count / cfg.expected_raters,
                )
            )
            i = j + 1
    return GoldLabel(
        task_id=labels[0].task_id,
        expected_raters=cfg.expected_raters,
        spans=gold_spans,
    )


def aggregate_choices(
    labels: Sequence[RaterChoiceLabel],
    cfg: ConsensusConfig,
    priors: Mapping[tuple[str, str], float] | None = None,
) -> GoldLabel:
    """Per-(mention, entity) vote counting with a k-of-n style threshold.

    Among entities passing the threshold for one mention, only the
    highest-voted is kept; vote ties break toward the higher prior, then
    the smaller entity id. "None of these" selections never produce gold.
    """
    _check_labels(labels, cfg)
    priors = priors or {}
    votes: dict[str, dict[str, int]] = {}
    for label in labels:
        for sel in label.selections:
            if sel.entity_id is None:
                votes.setdefault(sel.mention_id, {})
                continue
            per_mention = votes.setdefault(sel.mention_id, {})
            per_mention[sel.entity_id] = per_mention.get(sel.entity_id, 0) + 1
    choices: list[GoldChoice] = []
    for mention_id in sorted(votes):
        passing = {
            e: v for e, v in votes[mention_id].items() if v >= cfg.threshold
        }
        if not passing:
            continue
        entity_id = min(
            passing,
            key=lambda e: (
                -passing[e],
                -priors.get((mention_id, e), 0.0),
                e,
            ),
        )
        vote_count = passing[entity_id]
        choices.append(
            GoldChoice(
                mention_id=mention_id,
                entity_id=entity_id,
                vote_count=vote_count,
                salience=vote_count / cfg.expected_raters,
            )
        )
    return GoldLabel(
        task_id=labels[0].task_id,
        expected_raters=cfg.expected_raters,
        choices=choices,
    )


def broadcast_mentions(doc: Document, gold: GoldLabel) -> GoldLabel:
    """Propagate each gold span to every other occurrence of its surface.

    Occurrences are found in normalized text and must line up with token
    boundaries in the original text, so a surface never matches inside a
    longer word. Added spans inherit the source span's vote count (the
    maximum when several sources share a surface). Idempotent; never
    removes spans.
    """
    if gold.choices:
        raise LabelingError("broadcast applies to open-world span gold only")
    by_surface: dict[str, int] = {}
    for gs in gold.spans:
        surface = normalize_text(validate_span(doc, gs.span))
        if surface:
            by_surface[surface] = max(by_surface.get(surface, 0), gs.vote_count)
    existing = {gs.span.as_tuple() for gs in gold.spans}
    added: list[GoldSpan] = []
    for field in doc.fields:
        nt = normalize_with_map(field.text)
        if not nt.text:
            continue
        tokens = tokenize(field.text)
        token_starts = {t.start for t in tokens}
        token_ends = {t.end for t in tokens}
        for surface, vote_count in sorted(by_surface.items()):
            start = nt.text.find(surface)
            while start != -1:
                end = start + len(surface)
                if nt.is_boundary(start) and nt.is_boundary(end):
                    o_start, o_end = nt.source_span(start, end)
                    if (
                        o_start in token_starts
                        and o_end in token_ends
                        and (field.name, o_start, o_end) not in existing
                    ):
                        existing.add((field.name, o_start, o_end))
                        added.append(
                            GoldSpan(
                                span=Span(field.name, o_start, o_end),
                                vote_count=vote_count,
                                salience=vote_count / gold.expected_raters,
                            )
                        )
                start = nt.text.find(surface, start + 1)
    all_spans = sorted(
        gold.spans + added, key=lambda gs: (gs.span.field_name, gs.span.start, gs.span.end)
    )
    return GoldLabel(
        task_id=gold.task_id,
        expected_raters=gold.expected_raters,
        spans=all_spans,
    )


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def exact_match_f1(pred: Iterable[Span], gold: Iterable[Span]) -> PRF:
    """Span-identity precision/recall/F1.

    A predicted span is a true positive only when the identical
    (field, start, end) span exists in gold. Both sets empty scores 1.0;
    exactly one empty scores 0.0.
    """
    pred_set = {s.as_tuple() for s in pred}
    gold_set = {s.as_tuple() for s in gold}
    if not pred_set and not gold_set:
        return PRF(1.0, 1.0, 1.0)
    if not pred_set or not gold_set:
        return PRF(0.0, 0.0, 0.0)
    tp = len(pred_set & gold_set)
    precision = tp / len(pred_set)
    recall = tp / len(gold_set)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1)


@dataclass(frozen=True)
class CalibrationReport:
    rater_id: str
    f1_vs_golden: float
    f1_vs_consensus: float | None
    flagged: bool


def rater_calibration(
    rater_id: str,
    golden_results: Sequence[tuple[Sequence[Span], Sequence[Span]]],
    consensus_results: Sequence[tuple[Sequence[Span], Sequence[Span]]] = (),
    golden_threshold: float = 0.6,
    consensus_threshold: float = 0.5,
) -> CalibrationReport:
    """Mean exact-match F1 against experts and against peer consensus.

    The rater is flagged when either score falls below its threshold.
    Consensus comparison is optional (None when no completed tasks exist).
    """
    if not golden_results:
        raise LabelingError("calibration needs at least one golden result")
    golden_f1 = sum(
        exact_match_f1(pred, expert).f1 for pred, expert in golden_results
    ) / len(golden_results)
    consensus_f1: float | None = None
    if consensus_results:
        consensus_f1 = sum(
            exact_match_f1(pred, cons).f1 for pred, cons in consensus_results
        ) / len(consensus_results)
    flagged = golden_f1 < golden_threshold or (
        consensus_f1 is not None and consensus_f1 < consensus_threshold
    )
    return CalibrationReport(
        rater_id=rater_id,
        f1_vs_golden=golden_f1,
        f1_vs_consensus=consensus_f1,
        flagged=flagged,
    )
