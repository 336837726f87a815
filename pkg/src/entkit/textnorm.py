"""Unicode text normalization with an offset map back to the source string.

The pipeline, applied character by character:

    1. NFKC compatibility normalization
    2. case folding
    3. canonical decomposition (NFD) with nonspacing marks dropped
    4. whitespace runs collapsed to one ASCII space, leading/trailing
       whitespace removed

Both alias keys and document text go through the same pipeline, so fuzzy
matching reduces to exact matching over normalized text. Every normalized
character remembers which source character produced it, which lets matches
be reported in original-string offsets. All offsets count Unicode scalar
values, never bytes.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from functools import lru_cache

__all__ = ["NormalizedText", "normalize_text", "normalize_with_map"]


@lru_cache(maxsize=65536)
def _normalize_char(ch: str) -> str:
    """Normalize a single source character (may expand to several chars)."""
    folded = unicodedata.normalize("NFKC", ch).casefold()
    decomposed = unicodedata.normalize("NFD", folded)
    return "".join(c for c in decomposed if unicodedata.category(c) != "Mn")


@dataclass(frozen=True)
class NormalizedText:
    """Normalized string plus per-character source offsets.

    ``origins[j]`` is the source index of the character that produced
    normalized character ``j``. One source character can produce several
    normalized characters (casefolded ligatures, for example); a whitespace
    run produces exactly one space whose origin is the run's first
    character. ``origins`` is therefore non-decreasing.
    """

    text: str
    origins: tuple[int, ...]

    def is_boundary(self, j: int) -> bool:
        """True when position ``j`` does not split one source character's output."""
        if j == 0 or j == len(self.text):
            return True
        return self.origins[j] != self.origins[j - 1]

    def source_span(self, start: int, end: int) -> tuple[int, int]:
        """Map a normalized range back to a source-string range."""
        if not 0 <= start < end <= len(self.text):
            raise ValueError(f"normalized range ({start}, {end}) out of bounds")
        return self.origins[start], self.origins[end - 1] + 1


def normalize_with_map(text: str) -> NormalizedText:
    chars: list[str] = []
    origins: list[int] = []
    run_origin: int | None = None
    for i, ch in enumerate(text):
        for nch in _normalize_char(ch):
            if nch.isspace():
                if run_origin is None:
                    run_origin = i
                continue
            if run_origin is not None:
                if chars:  # a leading run is trimmed, not collapsed
                    chars.append(" ")
                    origins.append(run_origin)
                run_origin = None
            chars.append(nch)
            origins.append(i)
    # a trailing whitespace run is trimmed
    return NormalizedText("".join(chars), tuple(origins))


def normalize_text(text: str) -> str:
    """Normalized form of ``text``; idempotent."""
    return normalize_with_map(text).text
