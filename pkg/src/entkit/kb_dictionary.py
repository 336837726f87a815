"""Alias dictionary built from knowledge-base dump records.

Input is a simplified JSONL record stream (pages, redirects,
disambiguation pages, anchor counts) rather than raw wiki XML; converting
a real dump into this schema is a separate concern. Redirect chains are
traced to their fixed point, disambiguation pages fan out to their
targets, and every surviving alias maps to candidate entities with
count-derived priors P(entity | alias).

The persisted dictionary is a single versioned JSON line followed by a
checksum line, trading compactness for portability at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Iterator

from .textnorm import normalize_text

__all__ = [
    "AliasTable",
    "BuildReport",
    "Candidate",
    "CleanupRules",
    "DictionaryError",
    "DumpRecord",
    "FORMAT_VERSION",
    "RedirectResolution",
    "build_alias_table",
    "load_table",
    "normalize_alias",
    "read_dump_records",
    "resolve_redirects",
    "save_table",
]

FORMAT_VERSION = "1"
PRIOR_TOL = 1e-9


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class DumpRecord:
    """One dump record; exactly the fields for its kind are set."""

    kind: str
    id: str | None = None
    title: str | None = None
    from_title: str | None = None
    to_title: str | None = None
    targets: tuple[str, ...] = ()
    alias: str | None = None
    entity_title: str | None = None
    count: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "DumpRecord":
        kind = obj.get("kind")
        if kind == "page":
            if not obj.get("id") or not obj.get("title"):
                raise DictionaryError("page record needs non-empty id and title")
            return cls(kind="page", id=obj["id"], title=obj["title"])
        if kind == "redirect":
            if not obj.get("from_title") or not obj.get("to_title"):
                raise DictionaryError("redirect record needs from_title and to_title")
            return cls(kind="redirect", from_title=obj["from_title"], to_title=obj["to_title"])
        if kind == "disambiguation":
            if not obj.get("title") or not obj.get("targets"):
                raise DictionaryError("disambiguation record needs title and targets")
            return cls(kind="disambiguation", title=obj["title"], targets=tuple(obj["targets"]))
        if kind == "anchor_count":
            count = obj.get("count", 0)
            if not obj.get("alias") or not obj.get("entity_title") or count < 1:
                raise DictionaryError("anchor_count record needs alias, entity_title, count >= 1")
            return cls(
                kind="anchor_count",
                alias=obj["alias"],
                entity_title=obj["entity_title"],
                count=int(count),
            )
        raise DictionaryError(f"unknown record kind {kind!r}")


def read_dump_records(path: str | Path) -> Iterator[DumpRecord]:
    """Yield records from a JSONL dump file; errors name the record index."""
    with open(path, encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                yield DumpRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, DictionaryError) as exc:
                raise DictionaryError(f"{path}: record {idx}: {exc}") from exc


def normalize_alias(text: str) -> str:
    """NFKC, casefold, strip diacritics, collapse whitespace; idempotent."""
    return normalize_text(text)


@dataclass
class RedirectResolution:
    """Fixed-point redirect targets plus everything that was dropped."""

    resolved: dict[str, str]
    cycles: list[list[str]]
    dropped: dict[str, str]  # source -> reason


def resolve_redirects(
    redirects: dict[str, str], pages: set[str], max_depth: int = 16
) -> RedirectResolution:
    """Trace redirect chains to a final real page.

    Chains ending in a cycle, exceeding ``max_depth``, or dangling on a
    missing page are dropped entirely; each member is reported with its
    reason and each distinct cycle once.
    """
    resolved: dict[str, str] = {}
    dropped: dict[str, str] = {}
    cycles: list[list[str]] = []
    seen_cycles: set[tuple[str, ...]] = set()

    for source in sorted(redirects):
        if source in resolved or source in dropped:
            continue
        chain: list[str] = []
        pos: dict[str, int] = {}
        status = ""
        final: str | None = None
        loop: list[str] = []
        current = source
        while True:
            if current in resolved:
                status, final = "ok", resolved[current]
                break
            if current in dropped:
                prior = dropped[current]
                status = "leads_to_cycle" if prior == "cycle" else prior
                break
            if current not in redirects:
                if current in pages:
                    status, final = "ok", current
                else:
                    status = "dangling"
                break
            if current in pos:
                loop = chain[pos[current]:]
                key = tuple(sorted(loop))
                if key not in seen_cycles:
                    seen_cycles.add(key)
                    cycles.append(sorted(loop))
                status = "cycle"
                break
            pos[current] = len(chain)
            chain.append(current)
            if len(chain) > max_depth:
                status = "depth_exceeded"
                break
            current = redirects[current]
        loop_set = set(loop)
        for member in chain:
            if status == "ok":
                resolved[member] = final  # type: ignore[assignment]
            elif status == "cycle":
                dropped[member] = "cycle" if member in loop_set else "leads_to_cycle"
            else:
                dropped[member] = status
    return RedirectResolution(resolved=resolved, cycles=cycles, dropped=dropped)


@dataclass(frozen=True)
class Candidate:
    entity_id: str
    entity_title: str
    prior: float
    count: int


@dataclass
class CleanupRules:
    """Alias clean-ups; each rule can be switched off independently."""

    drop_empty: bool = True
    max_length: int | None = 64
    require_letter: bool = True

    def keep(self, alias: str) -> bool:
        if self.drop_empty and not alias:
            return False
        if self.max_length is not None and len(alias) > self.max_length:
            return False
        if self.require_letter and not any(
            unicodedata.category(c).startswith("L") for c in alias
        ):
            return False
        return True


@dataclass
class AliasTable:
    """Normalized alias -> candidates with priors, plus the entity registry."""

    entries: dict[str, list[Candidate]]
    registry: dict[str, str]  # entity_id -> title
    version: str = FORMAT_VERSION

    def validate(self) -> None:
        for alias, candidates in self.entries.items():
            if not candidates:
                raise DictionaryError(f"alias {alias!r} has no candidates")
            total = sum(c.prior for c in candidates)
            if abs(total - 1.0) > PRIOR_TOL:
                raise DictionaryError(
                    f"alias {alias!r}: priors sum to {total}, not 1"
                )
            ordered = sorted(candidates, key=lambda c: (-c.prior, c.entity_id))
            if [c.entity_id for c in candidates] != [c.entity_id for c in ordered]:
                raise DictionaryError(f"alias {alias!r}: candidates not sorted")
            for c in candidates:
                if c.entity_id not in self.registry:
                    raise DictionaryError(
                        f"alias {alias!r}: unknown entity {c.entity_id!r}"
                    )
                if not 0.0 < c.prior <= 1.0:
                    raise DictionaryError(
                        f"alias {alias!r}: prior {c.prior} outside (0, 1]"
                    )

    @property
    def alias_count(self) -> int:
        return len(self.entries)

    @property
    def entity_count(self) -> int:
        return len(self.registry)


@dataclass
class BuildReport:
    pages: int = 0
    redirects: int = 0
    redirects_resolved: int = 0
    redirects_dropped: int = 0
    cycles: int = 0
    disambiguations: int = 0
    anchors_dropped: int = 0
    aliases_dropped: int = 0
    aliases: int = 0
    entities: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_alias_table(
    records: Iterable[DumpRecord],
    cleanup: CleanupRules | None = None,
    max_depth: int = 16,
) -> tuple[AliasTable, BuildReport]:
    """Fold a record stream into an alias table.

    Aliases come from page titles, resolved redirect sources,
    disambiguation titles (one per target), and anchor counts. Structural
    aliases without anchor counts get count 1; anchor counts for one
    (alias, entity) pair are summed. The result is independent of record
    order.
    """
    cleanup = cleanup or CleanupRules()
    pages: dict[str, str] = {}  # title -> id
    redirects: dict[str, str] = {}
    disambigs: dict[str, tuple[str, ...]] = {}
    anchors: list[tuple[str, str, int]] = []
    report = BuildReport()

    for rec in records:
        if rec.kind == "page":
            pages[rec.title] = rec.id
        elif rec.kind == "redirect":
            redirects[rec.from_title] = rec.to_title
        elif rec.kind == "disambiguation":
            disambigs[rec.title] = rec.targets
        elif rec.kind == "anchor_count":
            anchors.append((rec.alias, rec.entity_title, rec.count))

    # entity universe: content pages that are neither redirects nor
    # disambiguation pages
    entity_titles = {
        t for t in pages if t not in redirects and t not in disambigs
    }
    resolution = resolve_redirects(redirects, entity_titles, max_depth=max_depth)

    def entity_of(title: str) -> str | None:
        """Resolve a title through redirects to an entity title, if any."""
        if title in entity_titles:
            return title
        return resolution.resolved.get(title)

    structural: set[tuple[str, str]] = set()  # (alias, entity_title)
    for title in entity_titles:
        structural.add((normalize_alias(title), title))
    for source, target in resolution.resolved.items():
        structural.add((normalize_alias(source), target))
    for title, targets in disambigs.items():
        alias = normalize_alias(title)
        for target in targets:
            entity = entity_of(target)
            if entity is not None:
                structural.add((alias, entity))

    counted: dict[tuple[str, str], int] = {}
    for alias_text, entity_title, count in anchors:
        entity = entity_of(entity_title)
        if entity is None:
            report.anchors_dropped += 1
            continue
        key = (normalize_alias(alias_text), entity)
        counted[key] = counted.get(key, 0) + count

    pair_counts: dict[str, dict[str, int]] = {}
    for (alias, entity), count in counted.items():
        pair_counts.setdefault(alias, {})[entity] = count
    for alias, entity in structural:
        pair_counts.setdefault(alias, {}).setdefault(entity, 1)

    entries: dict[str, list[Candidate]] = {}
    registry: dict[str, str] = {}
    for alias in sorted(pair_counts):
        if not cleanup.keep(alias):
            report.aliases_dropped += 1
            continue
        by_entity = pair_counts[alias]
        total = sum(by_entity.values())
        candidates = [
            Candidate(
                entity_id=pages[title],
                entity_title=title,
                prior=count / total,
                count=count,
            )
            for title, count in by_entity.items()
        ]
        candidates.sort(key=lambda c: (-c.prior, c.entity_id))
        entries[alias] = candidates
        for c in candidates:
            registry[c.entity_id] = c.entity_title

    report.pages = len(pages)
    report.redirects = len(redirects)
    report.redirects_resolved = len(resolution.resolved)
    report.redirects_dropped = len(resolution.dropped)
    report.cycles = len(resolution.cycles)
    report.disambiguations = len(disambigs)
    report.aliases = len(entries)
    report.entities = len(registry)

    if not entries:
        raise DictionaryError("dump produced an empty alias table")
    table = AliasTable(entries=entries, registry=dict(sorted(registry.items())))
    table.validate()
    return table, report


def save_table(table: AliasTable, path: str | Path) -> None:
    """Write the table as one JSON line plus a sha256 checksum line."""
    payload = {
        "version": table.version,
        "entities": table.registry,
        "aliases": {
            alias: [[c.entity_id, c.entity_title, c.count, c.prior] for c in cands]
            for alias, cands in table.entries.items()
        },
    }
    body = json.dumps(payload, ensure_ascii=False, sort_keys=True)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body + "\n" + "sha256:" + digest + "\n")


def load_table(path: str | Path) -> AliasTable:
    """Load and re-validate a persisted table; corruption fails loudly."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) != 2 or not lines[1].startswith("sha256:"):
        raise DictionaryError(f"{path}: expected one JSON line and one checksum line")
    body, checksum = lines
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if checksum != "sha256:" + digest:
        raise DictionaryError(f"{path}: checksum mismatch (truncated or edited file)")
    obj = json.loads(body)
    if obj.get("version") != FORMAT_VERSION:
        raise DictionaryError(
            f"{path}: unsupported dictionary version {obj.get('version')!r}"
        )
    entries = {
        alias: [
            Candidate(entity_id=e, entity_title=t, count=n, prior=p)
            for e, t, n, p in cands
        ]
        for alias, cands in obj["aliases"].items()
    }
    table = AliasTable(entries=entries, registry=obj["entities"], version=obj["version"])
    table.validate()
    return table
