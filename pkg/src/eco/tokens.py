"""Local tokenizer used for chunk sizing, prompt-size estimates and judging.

Word runs and single punctuation marks each count as one token; whitespace
never does, so token counts of adjacent slices cut at whitespace add up.
"""
from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_WORD_RE = re.compile(r"\w+", re.UNICODE)


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def words(text: str) -> list[str]:
    """Lowercased word tokens, punctuation dropped (used by the overlap judge)."""
    return [w.lower() for w in _WORD_RE.findall(text)]
