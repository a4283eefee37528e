"""Transcript normalization and word labeling, matching the consumer's rules.

The prediction toolkit interoperates at the file level only, so the exact
normalization pipeline is part of the data contract: NFKC, lowercase,
typographic single quotes folded to the ASCII apostrophe, dashes and slashes
split to spaces, every other punctuation character dropped.
"""

from __future__ import annotations

import unicodedata

_QUOTE_LIKE = set("‘’‚‛ʼ`´′")
_SPACE_LIKE = set("/⁄∕−")


def normalize_text(raw: str) -> str:
    chars = []
    for ch in unicodedata.normalize("NFKC", raw).lower():
        if ch in _QUOTE_LIKE:
            chars.append("'")
            continue
        if ch in _SPACE_LIKE or unicodedata.category(ch) == "Pd":
            chars.append(" ")
            continue
        if ch != "'" and unicodedata.category(ch)[0] == "P":
            continue
        chars.append(ch)
    return " ".join("".join(chars).split())


def normalize_transcript(raw: str) -> list[str]:
    return normalize_text(raw).split()


def word_char_spans(words: list[str]) -> list[tuple[int, int]]:
    """Half-open character ranges of each word in ' '.join(words)."""
    spans = []
    pos = 0
    for word in words:
        spans.append((pos, pos + len(word)))
        pos += len(word) + 1
    return spans


def label_words(ref: list[str], resp: list[str]) -> tuple[list[int], list[int]]:
    """(correct, valid) per reference word via unit-cost Levenshtein alignment.

    Exact matches label 1; substitutions and deletions label 0; inserted
    response words are ignored. Ties during backtrace prefer
    match > substitution > deletion > insertion.
    """
    n, m = len(ref), len(resp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i][j] = min(
                dist[i - 1][j - 1] + (ref[i - 1] != resp[j - 1]),
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
            )
    correct = [0] * n
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and ref[i - 1] == resp[j - 1] and dist[i - 1][j - 1] == here:
            correct[i - 1] = 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1][j - 1] + 1 == here:
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1][j] + 1 == here:
            i -= 1
        else:
            j -= 1
    return correct, [1] * n
