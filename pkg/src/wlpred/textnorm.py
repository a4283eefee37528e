"""Transcript normalization, response-to-reference alignment, and token maps.

Correctness labels live on canonical reference words: a listener response is
aligned to the normalized transcript and every reference word receives a
binary label. Inserted response words never create new targets.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

MATCH = "match"
SUBSTITUTION = "substitution"
DELETION = "deletion"
INSERTION = "insertion"

OP_CODES = {MATCH: "M", SUBSTITUTION: "S", DELETION: "D", INSERTION: "I"}

# Typographic single-quote variants collapsed to the ASCII apostrophe.
# Double quotes are ordinary punctuation and vanish.
_APOSTROPHE_LIKE = frozenset("‘’‚‛ʼ`´′")

# Characters that split joined words instead of vanishing: slashes plus the
# math minus, which is not in the dash category.
_SPLIT_CHARS = frozenset("/⁄∕−")


class InconsistentOffsets(ValueError):
    """Token character offsets are non-monotonic."""


def normalize_text(raw: str) -> str:
    """Normalize raw text to its canonical form: words joined by single spaces.

    Applies, in order: NFKC, lowercasing, typographic-quote folding to the
    ASCII apostrophe, dash/slash splitting, removal of all other punctuation
    (Unicode P* categories), whitespace collapsing. Idempotent.
    """
    text = unicodedata.normalize("NFKC", raw).lower()
    out = []
    for ch in text:
        if ch in _APOSTROPHE_LIKE:
            out.append("'")
        elif ch in _SPLIT_CHARS or unicodedata.category(ch) == "Pd":
            out.append(" ")
        elif ch != "'" and unicodedata.category(ch).startswith("P"):
            continue
        else:
            out.append(ch)
    return " ".join("".join(out).split())


def normalize_transcript(raw: str) -> list[str]:
    """Normalize raw text and split it into canonical words."""
    return normalize_text(raw).split()


@dataclass
class ReferenceTranscript:
    """Canonical reference words with character spans in the normalized text.

    ``char_spans`` are half-open index ranges into ``text``; ``token_spans``
    holds, per word, the indices of the decoder tokens assigned to it (filled
    by :func:`map_tokens_to_words`).
    """

    words: list[str]
    char_spans: list[tuple[int, int]]
    token_spans: Optional[list[list[int]]] = None

    @classmethod
    def from_raw(cls, raw: str) -> "ReferenceTranscript":
        return cls.from_words(normalize_transcript(raw))

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "ReferenceTranscript":
        spans = []
        pos = 0
        for word in words:
            if not word:
                raise ValueError("reference words must be non-empty")
            spans.append((pos, pos + len(word)))
            pos += len(word) + 1
        return cls(words=list(words), char_spans=spans)

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class WordLabelSet:
    """Per-reference-word binary correctness and validity mask.

    ``correct[i]`` is stored as 0 wherever ``valid[i]`` is 0 and is never
    read at those positions.
    """

    correct: list[int]
    valid: list[int]

    def __post_init__(self) -> None:
        if len(self.correct) != len(self.valid):
            raise ValueError("correct and valid must have equal length")

    def __len__(self) -> int:
        return len(self.correct)


class AlignmentOp(NamedTuple):
    """One edit operation; indices are into the reference/response word lists."""

    kind: str
    ref_index: Optional[int]
    hyp_index: Optional[int]


def align_and_label(
    ref: Sequence[str], resp: Sequence[str]
) -> tuple[WordLabelSet, list[AlignmentOp]]:
    """Label reference words by minimum-edit-distance alignment to a response.

    Unit costs (match 0; substitution/insertion/deletion 1). Exact matches get
    label 1, substitutions and deletions get 0, insertions produce no label.
    Equal-cost alignments are broken during backtrace by preferring
    match > substitution > deletion > insertion.
    """
    n, m = len(ref), len(resp)
    table = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = table[i - 1]
        row = [i] + [0] * m
        ref_word = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (ref_word != resp[j - 1])
            up = prev[j] + 1
            left = row[j - 1] + 1
            if diag <= up and diag <= left:
                row[j] = diag
            elif up <= left:
                row[j] = up
            else:
                row[j] = left
        table.append(row)

    ops: list[AlignmentOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        cur = table[i][j]
        if i > 0 and j > 0 and ref[i - 1] == resp[j - 1] and table[i - 1][j - 1] == cur:
            ops.append(AlignmentOp(MATCH, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and table[i - 1][j - 1] + 1 == cur:
            ops.append(AlignmentOp(SUBSTITUTION, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and table[i - 1][j] + 1 == cur:
            ops.append(AlignmentOp(DELETION, i - 1, None))
            i -= 1
        else:
            ops.append(AlignmentOp(INSERTION, None, j - 1))
            j -= 1
    ops.reverse()

    correct = [0] * n
    for op in ops:
        if op.kind == MATCH:
            correct[op.ref_index] = 1
    return WordLabelSet(correct=correct, valid=[1] * n), ops


def alignment_cost(ops: Sequence[AlignmentOp]) -> int:
    """Edit cost of an alignment: the number of non-match operations."""
    return sum(1 for op in ops if op.kind != MATCH)


def ops_to_codes(ops: Sequence[AlignmentOp]) -> str:
    """Compact M/S/D/I rendering of an alignment, in path order."""
    return "".join(OP_CODES[op.kind] for op in ops)


TokenWithOffsets = tuple[str, Optional[tuple[int, int]]]


def map_tokens_to_words(
    tokens: Sequence[TokenWithOffsets], ref: ReferenceTranscript
) -> list[list[int]]:
    """Assign decoder tokens to reference words; fills ``ref.token_spans``.

    Each token is (text, half-open char range in the normalized text).
    Prompt/start tokens carry an empty range and are assigned to no word.
    A token is assigned to the word covering the majority of its characters,
    ties to the earlier word. When no content token carries offsets, a greedy
    left-to-right character-count match of the token texts against the word
    sequence is used instead. Words may end up with an empty span; downstream
    code treats those words as invalid.
    """
    spans: list[list[int]] = [[] for _ in ref.words]
    content = []
    for idx, (text, rng) in enumerate(tokens):
        if rng is not None and rng[0] == rng[1]:
            continue  # prompt/start token
        content.append((idx, text, rng))

    if content and all(rng is None for _, _, rng in content):
        _assign_by_text(content, ref, spans)
    else:
        _assign_by_offsets(content, ref, spans)
    ref.token_spans = spans
    return spans


def _majority_word(
    start: int, end: int, word_ranges: Sequence[tuple[int, int]]
) -> Optional[int]:
    best_overlap = 0
    best_word = None
    for w, (ws, we) in enumerate(word_ranges):
        overlap = min(end, we) - max(start, ws)
        if overlap > best_overlap:
            best_overlap = overlap
            best_word = w
    return best_word


def _assign_by_offsets(content, ref: ReferenceTranscript, spans) -> None:
    prev_start = -1
    for idx, _text, rng in content:
        if rng is None:
            continue  # offsetless token among offset-carrying ones: no word
        start, end = rng
        if end < start or start < prev_start:
            raise InconsistentOffsets(f"token {idx} offsets ({start}, {end}) go backwards")
        prev_start = start
        word = _majority_word(start, end, ref.char_spans)
        if word is not None:
            spans[word].append(idx)


def _assign_by_text(content, ref: ReferenceTranscript, spans) -> None:
    # Word ranges in the space-free concatenation of the reference words.
    word_ranges = []
    pos = 0
    for word in ref.words:
        word_ranges.append((pos, pos + len(word)))
        pos += len(word)
    cursor = 0
    for idx, text, _rng in content:
        length = sum(1 for ch in text if not ch.isspace())
        word = _majority_word(cursor, cursor + length, word_ranges)
        if word is not None:
            spans[word].append(idx)
        cursor += length
