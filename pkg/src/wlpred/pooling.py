"""Deterministic pooling math over frozen-model tensors.

Covers sharpness scoring of cross-attention maps, dynamic top-K head
selection, character-to-word attention aggregation with temporal
normalization, local and global encoder pooling, and decoder word states.
All functions are pure; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class PoolingError(ValueError):
    pass


class NonFinite(PoolingError):
    """An attention map contains NaN or infinity."""


class EmptyCharSpan(PoolingError):
    """A word has no character rows in the alignment sequence."""


class AllFramesMasked(PoolingError):
    """The encoder mask leaves no valid frame."""


NORM_EPSILON = 1e-8
DEGENERATE_MASS = 1e-8


def sharpness(attention: np.ndarray) -> float:
    """Sum of row and column L2 norms of one attention map.

    Concentrated (alignment-like) maps score high: an n-by-n identity scores
    2n while the uniform map scores 2*sqrt(n).
    """
    a = np.asarray(attention)
    if not np.all(np.isfinite(a)):
        raise NonFinite("attention map contains non-finite values")
    sq = a.astype(np.float64) ** 2
    return float(np.sqrt(sq.sum(axis=1)).sum() + np.sqrt(sq.sum(axis=0)).sum())


@dataclass(frozen=True)
class HeadSelection:
    """Layer/head pairs chosen for alignment pooling, sharpest first."""

    pairs: list[tuple[int, int]]
    scores: list[float]


def select_top_heads(cross_attention: np.ndarray, k: int) -> HeadSelection:
    """Score every (layer, head) map by sharpness and keep the top k.

    Selection is per utterance. Ties break toward the lower layer index,
    then the lower head index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    attn = np.asarray(cross_attention)
    if attn.ndim != 4:
        raise ValueError("cross_attention must have shape (layers, heads, U, L)")
    layers, heads = attn.shape[:2]
    scored = [
        (-sharpness(attn[layer, head]), layer, head)
        for layer in range(layers)
        for head in range(heads)
    ]
    scored.sort()
    top = scored[: min(k, layers * heads)]
    return HeadSelection(
        pairs=[(layer, head) for _, layer, head in top],
        scores=[-neg for neg, _, _ in top],
    )


@dataclass(frozen=True)
class WordAttentionProfile:
    """Normalized frame weights for one word; zero at masked frames.

    ``degenerate`` is set when the pre-normalization mass was at most 1e-8;
    the weights then fall back to uniform over valid frames.
    """

    weights: np.ndarray
    word_index: int
    degenerate: bool


def word_attention_profile(
    cross_attention: np.ndarray,
    selection: HeadSelection,
    char_rows: Sequence[int],
    encoder_mask: np.ndarray,
    word_index: int = 0,
) -> WordAttentionProfile:
    """Aggregate selected attention maps into one word's frame profile.

    Selected maps are averaged over heads, then over the word's character
    rows; masked frames are zeroed; the result is normalized with an
    epsilon-stabilized denominator.
    """
    if len(char_rows) == 0:
        raise EmptyCharSpan(f"word {word_index} has no character rows")
    if not selection.pairs:
        raise ValueError("head selection is empty")
    attn = np.asarray(cross_attention)
    layer_idx = [p[0] for p in selection.pairs]
    head_idx = [p[1] for p in selection.pairs]
    head_mean = attn[layer_idx, head_idx].astype(np.float64).mean(axis=0)  # (U, L)
    raw = head_mean[list(char_rows)].mean(axis=0)  # (L,)
    valid = np.asarray(encoder_mask).astype(bool)
    if raw.shape != valid.shape:
        raise ValueError("encoder mask length does not match attention frames")
    raw = raw * valid
    mass = float(raw.sum())
    if mass <= DEGENERATE_MASS:
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise AllFramesMasked("no valid encoder frames")
        weights = valid.astype(np.float64) / n_valid
        return WordAttentionProfile(weights=weights, word_index=word_index, degenerate=True)
    return WordAttentionProfile(
        weights=raw / (mass + NORM_EPSILON), word_index=word_index, degenerate=False
    )


def local_pool(profile: WordAttentionProfile, encoder_states: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of encoder frames for one word."""
    states = np.asarray(encoder_states)
    if profile.weights.shape[0] != states.shape[0]:
        raise ValueError("profile length does not match encoder frames")
    return profile.weights @ states.astype(np.float64)


def global_pool(encoder_states: np.ndarray, encoder_mask: np.ndarray) -> np.ndarray:
    """Masked mean of encoder states over valid frames."""
    states = np.asarray(encoder_states)
    valid = np.asarray(encoder_mask).astype(bool)
    if valid.shape[0] != states.shape[0]:
        raise ValueError("encoder mask length does not match encoder frames")
    if not valid.any():
        raise AllFramesMasked("no valid encoder frames")
    return states[valid].astype(np.float64).mean(axis=0)


def decoder_word_state(
    decoder_states: np.ndarray, token_span: Sequence[int]
) -> tuple[np.ndarray, bool]:
    """Mean decoder state over a word's token span.

    An empty span yields a zero vector and False, signalling that the word
    must be masked out downstream.
    """
    states = np.asarray(decoder_states)
    if len(token_span) == 0:
        return np.zeros(states.shape[1], dtype=np.float64), False
    return states[list(token_span)].astype(np.float64).mean(axis=0), True
