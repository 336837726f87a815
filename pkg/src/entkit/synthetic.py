"""Deterministic synthetic corpora and dumps for demos and tests.

Everything here is a pure function of its seed, so the bundled evaluation
corpus can be regenerated bit-identically anywhere instead of being
checked in as data.
"""

from __future__ import annotations

import random

from .documents import DocType, Document, Field

__all__ = ["synth_corpus", "synth_dump_records", "WORDS"]

WORDS = [
    "red", "shoes", "apple", "mercury", "running", "store", "classic",
    "leather", "boots", "jacket", "phone", "case", "river", "delta",
    "coffee", "beans", "organic", "roast", "city", "park", "modern",
    "table", "lamp", "vintage", "camera", "lens", "travel", "guide",
    "biden", "joe", "planet", "element", "fruit", "sale", "offer",
    "limited", "edition", "sport", "watch", "steel", "band", "blue",
    "cotton", "shirt", "size", "large", "garden", "tools", "kit",
    "wireless", "speaker", "bass", "sound", "quality", "battery",
]

LANGUAGES = ["en", "fr", "de", "vi", "ar"]
DOC_TYPES = [DocType.AD, DocType.WEB_PAGE, DocType.UGC]


def synth_corpus(
    n_docs: int,
    seed: int = 0,
    min_tokens: int = 6,
    max_tokens: int = 24,
) -> list[Document]:
    """Random word-salad documents with titles and descriptions."""
    rng = random.Random(seed)
    docs: list[Document] = []
    for i in range(n_docs):
        title = " ".join(rng.choices(WORDS, k=rng.randint(2, 5)))
        body_len = rng.randint(min_tokens, max_tokens)
        words = rng.choices(WORDS, k=body_len)
        if rng.random() < 0.3:  # sprinkle punctuation and casing variety
            words[rng.randrange(len(words))] = words[rng.randrange(len(words))].capitalize() + "!"
        docs.append(
            Document(
                id=f"doc{i:05d}",
                doc_type=rng.choice(DOC_TYPES),
                language=rng.choice(LANGUAGES),
                fields=(
                    Field("title", title),
                    Field("description", " ".join(words)),
                ),
            )
        )
    return docs


def synth_dump_records(
    n_pages: int = 2000,
    n_redirects: int = 1500,
    n_disambigs: int = 100,
    n_anchors: int = 3000,
    n_cycles_2: int = 5,
    n_cycles_3: int = 4,
    n_dangling: int = 20,
    seed: int = 0,
) -> list[dict]:
    """Synthetic dump stream with injected redirect cycles and dangling targets.

    Record dicts match the dump JSONL schema; shuffle order is part of the
    seed so order-independence can be exercised.
    """
    rng = random.Random(seed)
    records: list[dict] = []
    page_titles = []
    for i in range(n_pages):
        title = f"{rng.choice(WORDS).capitalize()} {rng.choice(WORDS)} {i}"
        page_titles.append(title)
        records.append({"kind": "page", "id": f"E{i:05d}", "title": title})

    for i in range(n_redirects):
        source = f"Alias {rng.choice(WORDS)} {i}"
        if rng.random() < 0.15 and i > 0:
            # chain through an earlier redirect
            target = f"Alias {rng.choice(WORDS)} {rng.randrange(i)}"
        else:
            target = rng.choice(page_titles)
        records.append({"kind": "redirect", "from_title": source, "to_title": target})

    for i in range(n_cycles_2):
        a, b = f"CycleA {i}", f"CycleB {i}"
        records.append({"kind": "redirect", "from_title": a, "to_title": b})
        records.append({"kind": "redirect", "from_title": b, "to_title": a})
    for i in range(n_cycles_3):
        a, b, c = f"TriA {i}", f"TriB {i}", f"TriC {i}"
        records.append({"kind": "redirect", "from_title": a, "to_title": b})
        records.append({"kind": "redirect", "from_title": b, "to_title": c})
        records.append({"kind": "redirect", "from_title": c, "to_title": a})
    for i in range(n_dangling):
        records.append(
            {"kind": "redirect", "from_title": f"Dangling {i}", "to_title": f"Missing page {i}"}
        )

    for i in range(n_disambigs):
        targets = rng.sample(page_titles, k=rng.randint(2, 4))
        records.append(
            {"kind": "disambiguation", "title": f"{rng.choice(WORDS).capitalize()} (disambiguation) {i}", "targets": targets}
        )

    for _ in range(n_anchors):
        alias = " ".join(rng.choices(WORDS, k=rng.randint(1, 2)))
        records.append(
            {
                "kind": "anchor_count",
                "alias": alias,
                "entity_title": rng.choice(page_titles),
                "count": rng.randint(1, 100),
            }
        )

    rng.shuffle(records)
    return records
