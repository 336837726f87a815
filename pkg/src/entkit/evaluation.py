"""Metrics with per-slice breakdowns.

Span extraction reports micro precision/recall/F1 under exact-span
matching; linking reports accuracy over gold mentions; multiple-choice
tasks report the two task-level all-correct rates (all predicted entities
correct, and all correct entities predicted), each with an optional error
tolerance. The Overall row is always the micro-aggregation over items,
never the mean of slice metrics, so slice counts add up exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Mapping, Sequence

from .documents import Document, Span

__all__ = [
    "EvalReport",
    "EvaluationError",
    "SliceCounts",
    "linking_accuracy",
    "render_table",
    "span_prf",
    "task_all_correct_rates",
]


class EvaluationError(ValueError):
    pass


@dataclass
class SliceCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_items: int = 0

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        if self.tp == 0 and self.fp == 0 and self.fn == 0:
            return 1.0  # vacuously perfect: nothing to find, nothing found
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def metrics(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_items": self.n_items,
        }


@dataclass
class EvalReport:
    kind: str  # "span_prf" | "linking_accuracy" | "task_rates"
    overall: dict
    slices: dict[str, dict] = dc_field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "overall": self.overall, "slices": self.slices},
            indent=2,
            sort_keys=True,
        )


def _slice_key(doc: Document, slice_by: str) -> str:
    if slice_by == "language":
        return doc.language
    if slice_by == "doc_type":
        return doc.doc_type.value
    raise EvaluationError(f"cannot slice by {slice_by!r}")


def span_prf(
    pred: Mapping[str, Sequence[Span]],
    gold: Mapping[str, Sequence[Span]],
    docs: Mapping[str, Document] | None = None,
    slice_by: str | None = None,
) -> EvalReport:
    """Micro P/R/F1 with exact-span matching, optionally sliced.

    Every predicted doc id must exist in the gold universe. Documents in
    gold but absent from pred count as all-miss.
    """
    unknown = set(pred) - set(gold)
    if unknown:
        raise EvaluationError(
            f"predictions for documents outside the gold universe: {sorted(unknown)[:5]}"
        )
    if slice_by is not None and docs is None:
        raise EvaluationError("slicing requires the documents")
    overall = SliceCounts()
    slices: dict[str, SliceCounts] = {}
    for doc_id in gold:
        pred_set = {s.as_tuple() for s in pred.get(doc_id, ())}
        gold_set = {s.as_tuple() for s in gold[doc_id]}
        tp = len(pred_set & gold_set)
        fp = len(pred_set - gold_set)
        fn = len(gold_set - pred_set)
        buckets = [overall]
        if slice_by is not None:
            doc = docs.get(doc_id) if docs else None
            if doc is None:
                raise EvaluationError(f"no document for id {doc_id!r}")
            buckets.append(slices.setdefault(_slice_key(doc, slice_by), SliceCounts()))
        for b in buckets:
            b.tp += tp
            b.fp += fp
            b.fn += fn
            b.n_items += 1
    return EvalReport(
        kind="span_prf",
        overall=overall.metrics(),
        slices={k: v.metrics() for k, v in sorted(slices.items())},
    )


def linking_accuracy(
    pred: Mapping[str, str | None],
    gold: Mapping[str, str],
    mention_docs: Mapping[str, str] | None = None,
    docs: Mapping[str, Document] | None = None,
    slice_by: str | None = None,
) -> EvalReport:
    """Fraction of gold mentions whose predicted entity matches gold.

    A missing prediction or a NIL prediction on a gold-linked mention
    counts as wrong.
    """
    if slice_by is not None and (docs is None or mention_docs is None):
        raise EvaluationError("slicing requires mention-to-document and document maps")
    overall = {"correct": 0, "total": 0}
    slices: dict[str, dict] = {}
    for mention_id, gold_entity in gold.items():
        correct = pred.get(mention_id) == gold_entity
        buckets = [overall]
        if slice_by is not None:
            doc = docs.get(mention_docs.get(mention_id, ""), None) if docs else None
            if doc is None:
                raise EvaluationError(f"no document for mention {mention_id!r}")
            buckets.append(
                slices.setdefault(
                    _slice_key(doc, slice_by), {"correct": 0, "total": 0}
                )
            )
        for b in buckets:
            b["total"] += 1
            b["correct"] += int(correct)

    def finish(b: dict) -> dict:
        return {
            "accuracy": b["correct"] / b["total"] if b["total"] else 0.0,
            "correct": b["correct"],
            "total": b["total"],
        }

    return EvalReport(
        kind="linking_accuracy",
        overall=finish(overall),
        slices={k: finish(v) for k, v in sorted(slices.items())},
    )


def task_all_correct_rates(
    pred: Mapping[str, set[str]],
    gold: Mapping[str, set[str]],
    tolerance: int = 0,
) -> dict:
    """Task-level set containment rates.

    ``all_extracted_correct_rate``: fraction of tasks whose predicted
    entities are all in gold, up to ``tolerance`` violations.
    ``all_correct_extracted_rate``: the converse containment.
    """
    if set(pred) != set(gold):
        raise EvaluationError("pred and gold must cover the same task ids")
    if not gold:
        raise EvaluationError("no tasks to evaluate")
    extracted_ok = 0
    correct_ok = 0
    for task_id in gold:
        p, g = pred[task_id], gold[task_id]
        if len(p - g) <= tolerance:
            extracted_ok += 1
        if len(g - p) <= tolerance:
            correct_ok += 1
    n = len(gold)
    return {
        "all_extracted_correct_rate": extracted_ok / n,
        "all_correct_extracted_rate": correct_ok / n,
        "tasks": n,
        "tolerance": tolerance,
    }


def render_table(report: EvalReport, slice_name: str = "slice") -> str:
    """Aligned-column text table: one row per slice plus an Overall row."""
    if report.kind == "span_prf":
        headers = [slice_name, "precision", "recall", "f1", "tp", "fp", "fn"]
        keys = ["precision", "recall", "f1", "tp", "fp", "fn"]
    elif report.kind == "linking_accuracy":
        headers = [slice_name, "accuracy", "correct", "total"]
        keys = ["accuracy", "correct", "total"]
    else:
        raise EvaluationError(f"no table layout for report kind {report.kind!r}")

    def fmt(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    rows = [[name] + [fmt(metrics[k]) for k in keys] for name, metrics in report.slices.items()]
    rows.append(["Overall"] + [fmt(report.overall[k]) for k in keys])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
