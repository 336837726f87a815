"""Batch CLI: every stage is a pure file-to-file transform.

Subcommands: build-dict, extract, cluster, link, aggregate, broadcast,
eval, calibrate, serve. Each reads and writes the JSONL formats owned by
the stage modules, exits non-zero on validation errors, and writes a
machine-readable run summary (counts, timing) to standard error as JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .clustering import (
    SiameseParams,
    build_graph,
    canonicalize,
    louvain,
)
from .documents import (
    CorpusError,
    Document,
    Span,
    load_documents,
)
from .encoder import Encoder, EncoderError, EncoderSpec, pool
from .evaluation import (
    EvaluationError,
    linking_accuracy,
    render_table,
    span_prf,
    task_all_correct_rates,
)
from .extraction import (
    DecodeConfig,
    ExtractionError,
    load_heads,
    multi_task_extract,
)
from .kb_dictionary import (
    DictionaryError,
    build_alias_table,
    load_table,
    read_dump_records,
    save_table,
)
from .labeling import (
    ConsensusConfig,
    GoldLabel,
    GoldSpan,
    LabelingError,
    RaterChoiceLabel,
    RaterSpanLabel,
    Selection,
    aggregate_choices,
    aggregate_spans,
    broadcast_mentions,
    rater_calibration,
)
from .linking import (
    LinkerParams,
    LinkingError,
    embed_entities,
    load_entity_embeddings,
    resolve,
)
from .matching import MatchingError, compile_matcher, find_candidates
from .service import ServiceConfig, ServiceError, serve_labeling

_KNOWN_ERRORS = (
    CorpusError,
    DictionaryError,
    EncoderError,
    EvaluationError,
    ExtractionError,
    LabelingError,
    LinkingError,
    MatchingError,
    ServiceError,
    FileNotFoundError,
)


def _write_jsonl(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _summary(command: str, started: float, **counts: object) -> None:
    payload = {
        "command": command,
        "seconds": round(time.perf_counter() - started, 3),
        "counts": counts,
    }
    print(json.dumps(payload), file=sys.stderr)


# -- subcommands -------------------------------------------------------


def _cmd_build_dict(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    table, report = build_alias_table(read_dump_records(args.dump))
    save_table(table, args.out)
    _summary("build-dict", started, **report.to_dict())
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    docs = load_documents(args.docs)
    heads, spec = load_heads(args.heads)
    encoder = Encoder(spec)
    cfg = DecodeConfig(
        threshold=args.threshold, min_tokens=args.min_tokens, max_tokens=args.max_tokens
    )
    rows: list[dict] = []
    for doc in docs:
        by_type = multi_task_extract(doc, heads, cfg, encoder)
        for entity_type in sorted(by_type):
            for m in by_type[entity_type]:
                rows.append(
                    {
                        "doc_id": m.doc_id,
                        "entity_type": entity_type,
                        "field": m.span.field_name,
                        "start": m.span.start,
                        "end": m.span.end,
                        "surface": m.surface,
                        "score": m.score,
                    }
                )
    _write_jsonl(args.out, rows)
    _summary(
        "extract",
        started,
        documents=len(docs),
        heads=len(heads),
        mentions=len(rows),
        encoder_invocations=encoder.invocations,
    )
    return 0


def _mentions_with_embeddings(
    rows: list[dict], docs: dict[str, Document], encoder: Encoder
):
    """Rebuild Mention objects (with pooled embeddings) from extraction output."""
    from .documents import Mention, validate_span

    by_doc: dict[str, list[int]] = {}
    for i, row in enumerate(rows):
        by_doc.setdefault(row["doc_id"], []).append(i)
    mentions: list = [None] * len(rows)
    for doc_id in sorted(by_doc):
        doc = docs.get(doc_id)
        if doc is None:
            raise CorpusError(f"mention references unknown document {doc_id!r}")
        encodings = encoder.encode(doc)
        for i in by_doc[doc_id]:
            row = rows[i]
            span = Span(row["field"], row["start"], row["end"])
            surface = validate_span(doc, span)
            if row.get("surface") is not None and row["surface"] != surface:
                raise CorpusError(
                    f"surface {row['surface']!r} does not match document text {surface!r}"
                )
            mentions[i] = Mention(
                doc_id=doc_id,
                span=span,
                surface=surface,
                embedding=pool(encodings[span.field_name], span),
                score=row.get("score"),
            )
    return mentions


def _cmd_cluster(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    docs = {d.id: d for d in load_documents(args.docs)}
    rows = _read_jsonl(args.mentions)
    encoder = Encoder(EncoderSpec(dim=args.dim))
    mentions = _mentions_with_embeddings(rows, docs, encoder)
    params = (
        SiameseParams.from_dict(json.loads(Path(args.params).read_text()))
        if args.params
        else SiameseParams.identity(args.dim)
    )
    graph = build_graph(
        mentions, params, link_threshold=args.link_threshold, blocking=args.blocking
    )
    if args.graph_out:
        _write_jsonl(args.graph_out, [{"a": a, "b": b, "w": w} for a, b, w in graph.edges])
    if not graph.nodes:
        _write_jsonl(args.out, [])
        _summary("cluster", started, mentions=0, edges=0, entities=0)
        return 0
    partition = louvain(graph, resolution=args.resolution, seed=args.seed)
    entities = canonicalize(partition, mentions)
    out_rows = [
        {
            "entity_id": e.entity_id,
            "canonical_name": e.canonical_name,
            "mentions": [
                {
                    "doc_id": mentions[i].doc_id,
                    "field": mentions[i].span.field_name,
                    "start": mentions[i].span.start,
                    "end": mentions[i].span.end,
                }
                for i in e.members
            ],
        }
        for e in entities
    ]
    _write_jsonl(args.out, out_rows)
    _summary(
        "cluster",
        started,
        mentions=len(mentions),
        edges=len(graph.edges),
        entities=len(entities),
        modularity=partition.modularity,
    )
    return 0


def _cmd_link(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    docs = load_documents(args.docs)
    table = load_table(args.dict)
    matcher = compile_matcher(table)
    encoder = Encoder(EncoderSpec(dim=args.dim))
    params = (
        LinkerParams.load(args.linker) if args.linker else LinkerParams.default(args.dim)
    )
    if args.nil_threshold is not None:
        params.nil_threshold = args.nil_threshold
    if args.entity_embeddings:
        embeddings = load_entity_embeddings(args.entity_embeddings)
    else:
        embeddings = {
            e.entity_id: e
            for e in embed_entities(
                {eid: title for eid, title in table.registry.items()}, encoder
            )
        }
    rows: list[dict] = []
    n_nil = 0
    for doc in docs:
        candidates = find_candidates(doc, matcher)
        if not candidates:
            continue
        encodings = encoder.encode(doc)
        for cm in candidates:
            m_emb = pool(encodings[cm.span.field_name], cm.span)
            result = resolve(cm, m_emb, embeddings, params)
            n_nil += result.entity_id is None
            rows.append(
                {
                    "doc_id": doc.id,
                    "mention_id": cm.mention_id,
                    "entity_id": result.entity_id,
                    "score": result.score,
                }
            )
    _write_jsonl(args.out, rows)
    _summary("link", started, documents=len(docs), mentions=len(rows), nil=n_nil)
    return 0


def _load_tasks(path: str) -> dict[str, dict]:
    tasks = {}
    for row in _read_jsonl(path):
        tasks[row["task_id"]] = row
    return tasks


def _gold_to_row(gold: GoldLabel) -> dict:
    row: dict = {"task_id": gold.task_id, "expected_raters": gold.expected_raters}
    row["spans"] = [
        {
            "field": gs.span.field_name,
            "start": gs.span.start,
            "end": gs.span.end,
            "vote_count": gs.vote_count,
            "salience": gs.salience,
        }
        for gs in gold.spans
    ]
    row["choices"] = [
        {
            "mention_id": gc.mention_id,
            "entity_id": gc.entity_id,
            "vote_count": gc.vote_count,
            "salience": gc.salience,
        }
        for gc in gold.choices
    ]
    return row


def _cmd_aggregate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    from .documents import document_from_dict

    tasks = _load_tasks(args.tasks)
    label_rows = _read_jsonl(args.labels)
    by_task: dict[str, list[dict]] = {}
    for row in label_rows:
        by_task.setdefault(row["task_id"], []).append(row)
    out_rows = []
    for task_id in sorted(by_task):
        task = tasks.get(task_id)
        if task is None:
            raise LabelingError(f"labels reference unknown task {task_id!r}")
        rows = by_task[task_id]
        if args.kind == "spans":
            cfg = ConsensusConfig(
                method=args.method, expected_raters=args.expected_raters, k=args.k
            )
            labels = [
                RaterSpanLabel(
                    task_id=task_id,
                    rater_id=r["rater_id"],
                    spans=[Span(s["field"], s["start"], s["end"]) for s in r["spans"]],
                )
                for r in rows
            ]
            doc = document_from_dict(task["document"])
            gold = aggregate_spans(labels, cfg, doc)
        else:
            cfg = ConsensusConfig(
                method=args.method, expected_raters=args.expected_raters, k=args.k
            )
            labels = [
                RaterChoiceLabel(
                    task_id=task_id,
                    rater_id=r["rater_id"],
                    selections=[
                        Selection(s["mention_id"], s["entity_id"])
                        for s in r["selections"]
                    ],
                )
                for r in rows
            ]
            priors = {
                (m["mention_id"], c["entity_id"]): c.get("prior", 0.0)
                for m in task.get("mentions", [])
                for c in m.get("choices", [])
                if c.get("entity_id") is not None
            }
            gold = aggregate_choices(labels, cfg, priors)
        out_rows.append(_gold_to_row(gold))
    _write_jsonl(args.out, out_rows)
    _summary("aggregate", started, tasks=len(out_rows), labels=len(label_rows))
    return 0


def _cmd_broadcast(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    from .documents import document_from_dict

    tasks = _load_tasks(args.tasks)
    out_rows = []
    added = 0
    for row in _read_jsonl(args.gold):
        task = tasks.get(row["task_id"])
        if task is None:
            raise LabelingError(f"gold references unknown task {row['task_id']!r}")
        gold = GoldLabel(
            task_id=row["task_id"],
            expected_raters=row["expected_raters"],
            spans=[
                GoldSpan(
                    span=Span(s["field"], s["start"], s["end"]),
                    vote_count=s["vote_count"],
                    salience=s["salience"],
                )
                for s in row.get("spans", [])
            ],
        )
        doc = document_from_dict(task["document"])
        result = broadcast_mentions(doc, gold)
        added += len(result.spans) - len(gold.spans)
        out_rows.append(_gold_to_row(result))
    _write_jsonl(args.out, out_rows)
    _summary("broadcast", started, tasks=len(out_rows), spans_added=added)
    return 0


def _spans_by_doc(rows: list[dict]) -> dict[str, list[Span]]:
    out: dict[str, list[Span]] = {}
    for row in rows:
        out.setdefault(row["doc_id"], []).append(
            Span(row["field"], row["start"], row["end"])
        )
    return out


def _cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    docs = None
    if args.docs:
        docs = {d.id: d for d in load_documents(args.docs)}
    if args.mode == "spans":
        pred = _spans_by_doc(_read_jsonl(args.pred))
        gold = _spans_by_doc(_read_jsonl(args.gold))
        for doc_id in pred:
            gold.setdefault(doc_id, [])
        if docs is not None:
            for doc_id in docs:
                gold.setdefault(doc_id, [])
        report = span_prf(pred, gold, docs=docs, slice_by=args.slice)
        print(render_table(report, slice_name=args.slice or "slice"))
    elif args.mode == "links":
        pred_rows = _read_jsonl(args.pred)
        gold_rows = _read_jsonl(args.gold)
        pred = {r["mention_id"]: r.get("entity_id") for r in pred_rows}
        gold = {r["mention_id"]: r["entity_id"] for r in gold_rows}
        mention_docs = {r["mention_id"]: r.get("doc_id", "") for r in gold_rows}
        report = linking_accuracy(
            pred, gold, mention_docs=mention_docs, docs=docs, slice_by=args.slice
        )
        print(render_table(report, slice_name=args.slice or "slice"))
    else:
        pred = {r["task_id"]: set(r["entity_ids"]) for r in _read_jsonl(args.pred)}
        gold = {r["task_id"]: set(r["entity_ids"]) for r in _read_jsonl(args.gold)}
        rates = task_all_correct_rates(pred, gold, tolerance=args.tolerance)
        print(json.dumps(rates, indent=2))
        if args.out:
            Path(args.out).write_text(json.dumps(rates, indent=2, sort_keys=True))
        _summary("eval", started, mode=args.mode, tasks=rates["tasks"])
        return 0
    if args.out:
        Path(args.out).write_text(report.to_json())
    _summary("eval", started, mode=args.mode, items=report.overall.get("n_items", report.overall.get("total", 0)))
    return 0


def _cmd_calibrate(args: argparse.Namespace) -> int:
    started = time.perf_counter()

    def spans_of(row: dict) -> list[Span]:
        return [Span(s["field"], s["start"], s["end"]) for s in row.get("spans", [])]

    rater_rows = {
        r["task_id"]: spans_of(r)
        for r in _read_jsonl(args.labels)
        if r.get("rater_id", args.rater) == args.rater
    }
    expert_rows = {r["task_id"]: spans_of(r) for r in _read_jsonl(args.expert)}
    golden_results = [
        (rater_rows[tid], expert_rows[tid]) for tid in sorted(rater_rows) if tid in expert_rows
    ]
    consensus_results = []
    if args.consensus:
        consensus_rows = {r["task_id"]: spans_of(r) for r in _read_jsonl(args.consensus)}
        consensus_results = [
            (rater_rows[tid], consensus_rows[tid])
            for tid in sorted(rater_rows)
            if tid in consensus_rows
        ]
    report = rater_calibration(
        args.rater,
        golden_results,
        consensus_results,
        golden_threshold=args.golden_threshold,
        consensus_threshold=args.consensus_threshold,
    )
    payload = {
        "rater_id": report.rater_id,
        "f1_vs_golden": report.f1_vs_golden,
        "f1_vs_consensus": report.f1_vs_consensus,
        "flagged": report.flagged,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    _summary(
        "calibrate",
        started,
        golden_tasks=len(golden_results),
        consensus_tasks=len(consensus_results),
    )
    return 0


def _parse_config_file(path: str) -> dict[str, str]:
    """Key/value config: one ``key = value`` per line, # comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _cmd_serve(args: argparse.Namespace) -> int:
    values: dict[str, str] = {}
    if args.config:
        values = _parse_config_file(args.config)

    def pick(flag: object, key: str, cast, default):
        if flag is not None:
            return flag
        if key in values:
            return cast(values[key])
        return default

    config = ServiceConfig(
        tasks_path=pick(args.tasks, "tasks_path", str, None),
        event_log_path=pick(args.log, "event_log_path", str, None),
        seed=pick(args.seed, "seed", int, 0),
        golden_rate=pick(args.golden_rate, "golden_rate", float, 0.1),
        raters_open=pick(args.raters_open, "raters_open", int, 3),
        raters_closed=pick(args.raters_closed, "raters_closed", int, 5),
        consensus_method=pick(None, "consensus_method", str, "majority"),
        heads_path=pick(args.heads, "heads_path", str, None),
        dict_path=pick(args.dict, "dict_path", str, None),
        host=pick(args.host, "host", str, "127.0.0.1"),
        port=pick(args.port, "port", int, 8787),
    )
    if not config.tasks_path or not config.event_log_path:
        print("serve: tasks file and event log path are required", file=sys.stderr)
        return 2
    serve_labeling(config)
    return 0


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entkit", description="entity extraction pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dict", help="build the alias dictionary from a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_dict)

    p = sub.add_parser("extract", help="run extraction heads over a corpus")
    p.add_argument("--docs", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-tokens", type=int, default=1)
    p.add_argument("--max-tokens", type=int, default=16)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("cluster", help="cluster extracted mentions into entities")
    p.add_argument("--mentions", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None, help="siamese params JSON")
    p.add_argument("--graph-out", default=None)
    p.add_argument("--link-threshold", type=float, default=0.8)
    p.add_argument("--blocking", choices=["none", "normalized_surface"], default="normalized_surface")
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("link", help="match dictionary candidates and resolve entities")
    p.add_argument("--docs", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--linker", default=None)
    p.add_argument("--entity-embeddings", default=None)
    p.add_argument("--nil-threshold", type=float, default=None)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(func=_cmd_link)

    p = sub.add_parser("aggregate", help="aggregate rater labels into gold")
    p.add_argument("--labels", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["spans", "choices"], default="spans")
    p.add_argument("--method", choices=["and", "or", "majority", "k_of_n"], default="majority")
    p.add_argument("--expected-raters", type=int, default=3)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("broadcast", help="broadcast gold spans to repeated surfaces")
    p.add_argument("--gold", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_broadcast)

    p = sub.add_parser("eval", help="score predictions against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--mode", choices=["spans", "links", "tasks"], default="spans")
    p.add_argument("--docs", default=None)
    p.add_argument("--slice", choices=["language", "doc_type"], default=None)
    p.add_argument("--tolerance", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("calibrate", help="score a rater against experts and consensus")
    p.add_argument("--rater", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--consensus", default=None)
    p.add_argument("--golden-threshold", type=float, default=0.6)
    p.add_argument("--consensus-threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("serve", help="run the labeling HTTP service")
    p.add_argument("--config", default=None)
    p.add_argument("--tasks", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--golden-rate", type=float, default=None)
    p.add_argument("--raters-open", type=int, default=None)
    p.add_argument("--raters-closed", type=int, default=None)
    p.add_argument("--heads", default=None)
    p.add_argument("--dict", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        print(f"entkit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
