"""Labeling HTTP service: serves tasks to raters, collects labels, exposes
consensus and calibration, and previews extraction on ad-hoc documents.

State is an append-only JSONL event log (task created, label submitted)
replayed at startup; there is no database. Label submissions serialize
through a single writer lock, and a resubmission by the same rater
replaces the earlier label. Golden tasks are interleaved per rater at a
configured rate by a seeded draw, and their payloads are stripped of
everything that could give them away.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .documents import CorpusError, Document, Span, document_from_dict, document_to_dict, validate_span
from .encoder import Encoder, EncoderSpec
from .extraction import DecodeConfig, HeadParams, load_heads, multi_task_extract
from .kb_dictionary import load_table
from .labeling import (
    ConsensusConfig,
    GoldLabel,
    RaterChoiceLabel,
    RaterSpanLabel,
    Selection,
    aggregate_choices,
    aggregate_spans,
    rater_calibration,
)
from .matching import CompiledMatcher, compile_matcher, find_candidates

__all__ = ["ServiceConfig", "LabelingStore", "ServiceError", "create_app", "serve_labeling"]

SCHEMA_VERSION = 1


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class ServiceConfig:
    tasks_path: str
    event_log_path: str
    seed: int = 0
    golden_rate: float = 0.1
    raters_open: int = 3
    raters_closed: int = 5
    consensus_method: str = "majority"
    golden_threshold: float = 0.6
    consensus_threshold: float = 0.5
    heads_path: str | None = None
    dict_path: str | None = None
    decode_threshold: float = 0.5
    host: str = "127.0.0.1"
    port: int = 8787


@dataclass
class TaskRecord:
    task_id: str
    kind: str  # open_world | closed_world
    document: Document
    mentions: list[dict] = dc_field(default_factory=list)
    is_golden: bool = False
    expert_label: dict | None = None
    status: str = "open"

    def __post_init__(self) -> None:
        if self.kind not in ("open_world", "closed_world"):
            raise ServiceError(422, "bad_task", f"unknown task kind {self.kind!r}")
        if self.is_golden and self.expert_label is None:
            raise ServiceError(422, "bad_task", f"golden task {self.task_id} lacks an expert label")

    def public_payload(self) -> dict:
        """Rater-facing payload; never contains golden markers."""
        payload = {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "kind": self.kind,
            "document": document_to_dict(self.document),
        }
        if self.kind == "closed_world":
            payload["mentions"] = self.mentions
        return payload

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "document": document_to_dict(self.document),
            "mentions": self.mentions,
            "is_golden": self.is_golden,
            "expert_label": self.expert_label,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskRecord":
        return cls(
            task_id=obj["task_id"],
            kind=obj["kind"],
            document=document_from_dict(obj["document"]),
            mentions=obj.get("mentions") or [],
            is_golden=bool(obj.get("is_golden", False)),
            expert_label=obj.get("expert_label"),
        )


class LabelingStore:
    """In-memory task/label state backed by an append-only event log."""

    def __init__(self, config: ServiceConfig) -> None:
        self.config = config
        self._lock = threading.RLock()
        self.tasks: dict[str, TaskRecord] = {}
        self._order: list[str] = []
        self.labels: dict[str, dict[str, dict]] = {}
        self._assignment: dict[str, str] = {}
        self._assigned_raters: dict[str, set[str]] = {}
        self._rater_rng: dict[str, random.Random] = {}
        self.golden_served: dict[str, list[str]] = {}
        self._log_path = Path(config.event_log_path)
        self._replay()
        self._load_tasks_file()

    # -- persistence ---------------------------------------------------

    def _replay(self) -> None:
        if not self._log_path.exists():
            return
        with open(self._log_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["event"] == "task_created":
                    self._add_task(TaskRecord.from_dict(event["task"]), log=False)
                elif event["event"] == "label_submitted":
                    self._store_label(
                        event["task_id"], event["rater_id"], event["label"], log=False
                    )

    def _load_tasks_file(self) -> None:
        path = Path(self.config.tasks_path)
        if not path.exists():
            raise ServiceError(500, "bad_config", f"tasks file {path} not found")
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = TaskRecord.from_dict(json.loads(line))
                if record.task_id not in self.tasks:
                    self._add_task(record, log=True)

    def _append_event(self, event: dict) -> None:
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")

    # -- task/label state ----------------------------------------------

    def _add_task(self, record: TaskRecord, log: bool) -> None:
        with self._lock:
            self.tasks[record.task_id] = record
            self._order.append(record.task_id)
            self.labels.setdefault(record.task_id, {})
            self._assigned_raters.setdefault(record.task_id, set())
            if log:
                self._append_event({"event": "task_created", "task": record.to_dict()})

    def _raters_per_task(self, record: TaskRecord) -> int:
        if record.kind == "closed_world":
            return self.config.raters_closed
        return self.config.raters_open

    def _store_label(self, task_id: str, rater_id: str, label: dict, log: bool) -> None:
        with self._lock:
            self.labels.setdefault(task_id, {})[rater_id] = label
            self._assigned_raters.setdefault(task_id, set()).add(rater_id)
            if self._assignment.get(rater_id) == task_id:
                del self._assignment[rater_id]
            record = self.tasks.get(task_id)
            if record is not None:
                n = self._raters_per_task(record)
                if len(self.labels[task_id]) >= n:
                    record.status = "complete"
            if log:
                self._append_event(
                    {
                        "event": "label_submitted",
                        "task_id": task_id,
                        "rater_id": rater_id,
                        "label": label,
                    }
                )

    def _rng(self, rater_id: str) -> random.Random:
        if rater_id not in self._rater_rng:
            self._rater_rng[rater_id] = random.Random(f"{self.config.seed}:{rater_id}")
        return self._rater_rng[rater_id]

    def known_rater(self, rater_id: str) -> bool:
        with self._lock:
            if rater_id in self._assignment:
                return True
            return any(rater_id in by_rater for by_rater in self.labels.values())

    # -- operations ----------------------------------------------------

    def next_task(self, rater_id: str) -> TaskRecord:
        """FIFO assignment with seeded golden interleaving.

        The same task keeps coming back until the rater submits; a task
        never reaches more than its kind's rater quota.
        """
        if not rater_id:
            raise ServiceError(422, "bad_rater", "rater_id must be non-empty")
        with self._lock:
            assigned = self._assignment.get(rater_id)
            if assigned is not None:
                return self.tasks[assigned]

            def eligible(record: TaskRecord) -> bool:
                if rater_id in self.labels[record.task_id]:
                    return False
                takers = self._assigned_raters[record.task_id] | set(
                    self.labels[record.task_id]
                )
                return len(takers) < self._raters_per_task(record)

            golden = [
                self.tasks[t] for t in self._order
                if self.tasks[t].is_golden and eligible(self.tasks[t])
            ]
            regular = [
                self.tasks[t] for t in self._order
                if not self.tasks[t].is_golden and eligible(self.tasks[t])
            ]
            if not golden and not regular:
                raise ServiceError(404, "no_tasks", f"no open tasks for rater {rater_id!r}")
            if golden and regular:
                pick_golden = self._rng(rater_id).random() < self.config.golden_rate
                chosen = golden[0] if pick_golden else regular[0]
            else:
                chosen = (golden or regular)[0]
            self._assignment[rater_id] = chosen.task_id
            self._assigned_raters[chosen.task_id].add(rater_id)
            if chosen.is_golden:
                self.golden_served.setdefault(rater_id, []).append(chosen.task_id)
            return chosen

    def validate_label(self, record: TaskRecord, body: dict) -> dict:
        if record.kind == "open_world":
            spans = body.get("spans")
            if not isinstance(spans, list):
                raise ServiceError(422, "bad_label", "open-world label needs a spans list")
            clean = []
            for raw in spans:
                try:
                    span = Span(raw["field"], raw["start"], raw["end"])
                    validate_span(record.document, span)
                except (KeyError, TypeError, CorpusError) as exc:
                    raise ServiceError(
                        422, "bad_span", f"invalid span {raw!r}: {exc}"
                    ) from exc
                clean.append({"field": span.field_name, "start": span.start, "end": span.end})
            return {"spans": clean}
        selections = body.get("selections")
        if not isinstance(selections, list):
            raise ServiceError(422, "bad_label", "closed-world label needs a selections list")
        allowed = {
            m["mention_id"]: {c["entity_id"] for c in m["choices"]}
            for m in record.mentions
        }
        seen: set[str] = set()
        clean = []
        for raw in selections:
            mention_id = raw.get("mention_id") if isinstance(raw, dict) else None
            if mention_id not in allowed:
                raise ServiceError(422, "bad_selection", f"unknown mention {mention_id!r}")
            if mention_id in seen:
                raise ServiceError(
                    422, "bad_selection", f"duplicate selection for mention {mention_id!r}"
                )
            entity_id = raw.get("entity_id")
            if entity_id not in allowed[mention_id]:
                raise ServiceError(
                    422,
                    "bad_selection",
                    f"entity {entity_id!r} is not a choice for mention {mention_id!r}",
                )
            seen.add(mention_id)
            clean.append({"mention_id": mention_id, "entity_id": entity_id})
        return {"selections": clean}

    def submit(self, task_id: str, rater_id: str, body: dict) -> dict:
        with self._lock:
            record = self.tasks.get(task_id)
            if record is None:
                raise ServiceError(404, "unknown_task", f"no task {task_id!r}")
            if not rater_id:
                raise ServiceError(422, "bad_rater", "rater_id must be non-empty")
            already = rater_id in self.labels[task_id]
            if record.status == "complete" and not already:
                raise ServiceError(409, "task_complete", f"task {task_id!r} is complete")
            label = self.validate_label(record, body)
            self._store_label(task_id, rater_id, label, log=True)
            return {
                "task_id": task_id,
                "rater_id": rater_id,
                "replaced": already,
                "status": record.status,
            }

    def _span_labels(self, record: TaskRecord) -> list[RaterSpanLabel]:
        return [
            RaterSpanLabel(
                task_id=record.task_id,
                rater_id=rater_id,
                spans=[Span(s["field"], s["start"], s["end"]) for s in label["spans"]],
            )
            for rater_id, label in sorted(self.labels[record.task_id].items())
        ]

    def _choice_labels(self, record: TaskRecord) -> list[RaterChoiceLabel]:
        return [
            RaterChoiceLabel(
                task_id=record.task_id,
                rater_id=rater_id,
                selections=[
                    Selection(s["mention_id"], s["entity_id"])
                    for s in label["selections"]
                ],
            )
            for rater_id, label in sorted(self.labels[record.task_id].items())
        ]

    def consensus(self, task_id: str, method: str | None, k: int | None) -> dict:
        with self._lock:
            record = self.tasks.get(task_id)
            if record is None:
                raise ServiceError(404, "unknown_task", f"no task {task_id!r}")
            n = self._raters_per_task(record)
            if record.kind == "closed_world" and method is None:
                cfg = ConsensusConfig(method="k_of_n", expected_raters=n, k=k or 2)
            else:
                cfg = ConsensusConfig(
                    method=method or self.config.consensus_method,
                    expected_raters=n,
                    k=k,
                )
            submitted = len(self.labels[task_id])
            if submitted < cfg.threshold:
                raise ServiceError(
                    409,
                    "not_enough_labels",
                    f"{submitted} labels < threshold {cfg.threshold}",
                )
            if record.kind == "open_world":
                gold = aggregate_spans(self._span_labels(record), cfg, record.document)
            else:
                priors = {
                    (m["mention_id"], c["entity_id"]): c.get("prior", 0.0)
                    for m in record.mentions
                    for c in m["choices"]
                    if c["entity_id"] is not None
                }
                gold = aggregate_choices(self._choice_labels(record), cfg, priors)
            return _gold_to_dict(gold, cfg.method)

    def calibration(self, rater_id: str) -> dict:
        with self._lock:
            if not self.known_rater(rater_id):
                raise ServiceError(404, "unknown_rater", f"no labels from rater {rater_id!r}")
            golden_results = []
            consensus_results = []
            for task_id in self._order:
                record = self.tasks[task_id]
                if record.kind != "open_world":
                    continue
                label = self.labels[task_id].get(rater_id)
                if label is None:
                    continue
                rater_spans = [
                    Span(s["field"], s["start"], s["end"]) for s in label["spans"]
                ]
                if record.is_golden:
                    expert = [
                        Span(s["field"], s["start"], s["end"])
                        for s in (record.expert_label or {}).get("spans", [])
                    ]
                    golden_results.append((rater_spans, expert))
                elif record.status == "complete":
                    cfg = ConsensusConfig(
                        method=self.config.consensus_method,
                        expected_raters=self._raters_per_task(record),
                    )
                    gold = aggregate_spans(self._span_labels(record), cfg, record.document)
                    consensus_results.append(
                        (rater_spans, [gs.span for gs in gold.spans])
                    )
            if not golden_results:
                raise ServiceError(
                    409, "no_golden_exposure", f"rater {rater_id!r} has answered no golden tasks"
                )
            report = rater_calibration(
                rater_id,
                golden_results,
                consensus_results,
                golden_threshold=self.config.golden_threshold,
                consensus_threshold=self.config.consensus_threshold,
            )
            return {
                "rater_id": report.rater_id,
                "f1_vs_golden": report.f1_vs_golden,
                "f1_vs_consensus": report.f1_vs_consensus,
                "flagged": report.flagged,
                "golden_tasks": len(golden_results),
                "consensus_tasks": len(consensus_results),
            }


def _gold_to_dict(gold: GoldLabel, method: str) -> dict:
    out: dict[str, Any] = {
        "task_id": gold.task_id,
        "method": method,
        "expected_raters": gold.expected_raters,
    }
    out["spans"] = [
        {
            "field": gs.span.field_name,
            "start": gs.span.start,
            "end": gs.span.end,
            "vote_count": gs.vote_count,
            "salience": gs.salience,
        }
        for gs in gold.spans
    ]
    out["choices"] = [
        {
            "mention_id": gc.mention_id,
            "entity_id": gc.entity_id,
            "vote_count": gc.vote_count,
            "salience": gc.salience,
        }
        for gc in gold.choices
    ]
    return out


class _Extractor:
    """Lazy holder for the trained pipeline used by the preview endpoint."""

    def __init__(self, config: ServiceConfig) -> None:
        self.heads: list[HeadParams] | None = None
        self.encoder: Encoder | None = None
        self.matcher: CompiledMatcher | None = None
        self.decode = DecodeConfig(threshold=config.decode_threshold)
        if config.heads_path:
            self.heads, spec = load_heads(config.heads_path)
            self.encoder = Encoder(spec)
        if config.dict_path:
            self.matcher = compile_matcher(load_table(config.dict_path))

    def extract(self, doc: Document) -> dict:
        if self.heads is None and self.matcher is None:
            raise ServiceError(
                409, "not_configured", "no heads or dictionary configured for extraction"
            )
        out: dict[str, Any] = {"doc_id": doc.id}
        if self.heads is not None and self.encoder is not None:
            by_type = multi_task_extract(doc, self.heads, self.decode, self.encoder)
            out["mentions"] = {
                etype: [
                    {
                        "field": m.span.field_name,
                        "start": m.span.start,
                        "end": m.span.end,
                        "surface": m.surface,
                        "score": m.score,
                    }
                    for m in mentions
                ]
                for etype, mentions in by_type.items()
            }
        if self.matcher is not None:
            out["candidates"] = [
                {
                    "mention_id": m.mention_id,
                    "field": m.span.field_name,
                    "start": m.span.start,
                    "end": m.span.end,
                    "surface": m.surface,
                    "candidates": [
                        {"entity_id": c.entity_id, "prior": c.prior, "count": c.count}
                        for c in m.candidates
                    ],
                }
                for m in find_candidates(doc, self.matcher)
            ]
        return out


def create_app(config: ServiceConfig) -> FastAPI:
    store = LabelingStore(config)
    extractor = _Extractor(config)
    app = FastAPI(title="labeling service")
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def service_error_handler(_req: Request, exc: ServiceError) -> JSONResponse:
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message},
        )

    @app.get("/v1/tasks/next")
    def tasks_next(rater_id: str = "") -> dict:
        return store.next_task(rater_id).public_payload()

    @app.post("/v1/tasks/{task_id}/labels")
    async def submit_labels(task_id: str, request: Request) -> dict:
        try:
            body = await request.json()
        except Exception as exc:
            raise ServiceError(422, "bad_json", f"request body is not JSON: {exc}")
        rater_id = body.get("rater_id", "")
        return store.submit(task_id, rater_id, body)

    @app.get("/v1/tasks/{task_id}/consensus")
    def consensus(task_id: str, method: str | None = None, k: int | None = None) -> dict:
        return store.consensus(task_id, method, k)

    @app.get("/v1/raters/{rater_id}/calibration")
    def calibration(rater_id: str) -> dict:
        return store.calibration(rater_id)

    @app.post("/v1/extract")
    async def extract(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception as exc:
            raise ServiceError(422, "bad_json", f"request body is not JSON: {exc}")
        try:
            doc = document_from_dict(body.get("document", body))
        except CorpusError as exc:
            raise ServiceError(422, "bad_document", str(exc))
        return extractor.extract(doc)

    return app


def serve_labeling(config: ServiceConfig) -> None:
    """Run the service under uvicorn (blocking)."""
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
