"""Extraction pipeline: audio -> frozen-model tensors -> bundle files.

Per utterance: preprocess the audio, run the encoder once, teacher-force the
normalized transcript through the subword decoder (final-layer states), run
the auxiliary character-level pass (cross-attention only), map tokens and
characters to reference words, derive labels from the listener response,
and write one bundle. A dataset run also emits index.tsv and labels.tsv.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import preprocess_audio
from .backbone import Token, load_backbone
from .container import write_bundle_file
from .textnorm import label_words, normalize_transcript, word_char_spans

SEVERITIES = ("mild", "moderate", "moderately_severe", "unknown")


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "toy"  # toy | small_en | medium
    oracle_clean: bool = False  # use clean reference audio for the alignment pass


@dataclass(frozen=True)
class DatasetRow:
    utterance_id: str
    audio_path: str
    transcript: str
    response: str
    scene_id: str
    listener_id: str
    severity: str
    split: str
    clean_audio_path: Optional[str] = None


def read_dataset_index(path) -> list[DatasetRow]:
    """Tab-separated rows: utterance_id, audio_path, transcript, response,
    scene_id, listener_id, severity, split[, clean_audio_path]."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or (lineno == 1 and line.startswith("utterance_id\t")):
                continue
            fields = line.split("\t")
            if len(fields) not in (8, 9):
                raise ExtractionError(f"{path}:{lineno}: expected 8 or 9 columns, got {len(fields)}")
            if fields[6] not in SEVERITIES:
                raise ExtractionError(f"{path}:{lineno}: unknown severity {fields[6]!r}")
            rows.append(DatasetRow(*fields[:8], clean_audio_path=fields[8] if len(fields) == 9 else None))
    return rows


def assign_tokens_to_words(tokens: list[Token], char_spans: list[tuple[int, int]]) -> list[list[int]]:
    """Offset-majority assignment; prompt and offsetless tokens get no word."""
    spans: list[list[int]] = [[] for _ in char_spans]
    for idx, token in enumerate(tokens):
        if token.char_range is None or token.is_prompt:
            continue
        start, end = token.char_range
        best_overlap, best_word = 0, None
        for w, (ws, we) in enumerate(char_spans):
            overlap = min(end, we) - max(start, ws)
            if overlap > best_overlap:
                best_overlap, best_word = overlap, w
        if best_word is not None:
            spans[best_word].append(idx)
    return spans


def char_rows_per_word(
    tokens: list[Token], char_spans: list[tuple[int, int]], n_prompt: int
) -> list[list[int]]:
    """Rows of each word's characters in the stored (prompt-free) attention."""
    rows: list[list[int]] = [[] for _ in char_spans]
    for idx, token in enumerate(tokens[n_prompt:]):
        start, end = token.char_range
        for w, (ws, we) in enumerate(char_spans):
            if min(end, we) - max(start, ws) > 0:
                rows[w].append(idx)
                break
    return rows


def extract_utterance(row: DatasetRow, backbone, config: ExtractorConfig) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (metadata, encoder_states, encoder_mask, decoder_states, attention)."""
    words = normalize_transcript(row.transcript)
    if not words:
        raise ExtractionError(f"{row.utterance_id}: transcript normalizes to zero words")
    text = " ".join(words)
    char_spans = word_char_spans(words)

    prepared = preprocess_audio(row.audio_path)
    encoder_states, encoder_mask = backbone.encode(prepared)

    # main pass: subword teacher forcing for decoder word states
    subword = backbone.subword_tokens(text)
    decoder_states, _ = backbone.decode(encoder_states, [t.token_id for t in subword])
    token_spans = assign_tokens_to_words(subword, char_spans)

    # auxiliary pass: character-level teacher forcing for alignment capture;
    # optionally on clean reference audio (diagnostic upper bound)
    align_states, align_mask = encoder_states, encoder_mask
    if config.oracle_clean:
        if not row.clean_audio_path:
            raise ExtractionError(f"{row.utterance_id}: oracle_clean needs clean_audio_path")
        align_states, align_mask = backbone.encode(preprocess_audio(row.clean_audio_path))
    chars = backbone.char_tokens(text)
    n_prompt = sum(1 for t in chars if t.is_prompt)
    _, char_attention = backbone.decode(align_states, [t.token_id for t in chars])
    attention = char_attention[:, :, n_prompt:, :]
    char_rows = char_rows_per_word(chars, char_spans, n_prompt)

    correct, valid = label_words(words, normalize_transcript(row.response))
    n_valid = sum(valid)
    target = 100.0 * sum(c for c, m in zip(correct, valid) if m) / n_valid if n_valid else None

    metadata = {
        "kind": "feature_bundle",
        "utterance_id": row.utterance_id,
        "scene_id": row.scene_id,
        "listener_id": row.listener_id,
        "severity": row.severity,
        "token_spans": token_spans,
        "char_rows": char_rows,
        "labels": {"correct": correct, "valid": valid},
        "alignment_len": int(attention.shape[2]),
        "attention_is_softmax": True,
        "target_score": target,
        "extractor": {
            "backbone": backbone.name,
            "oracle_clean": config.oracle_clean,
            "window_seconds": backbone.window_seconds,
        },
    }
    return metadata, encoder_states, encoder_mask, decoder_states, attention


def extract_dataset(index_path, out_dir, config: ExtractorConfig) -> list[str]:
    """Extract every indexed utterance; writes bundles, index.tsv, labels.tsv."""
    rows = read_dataset_index(index_path)
    if not rows:
        raise ExtractionError(f"{index_path}: empty dataset index")
    backbone = load_backbone(config.backbone)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_lines = ["\t".join(("utterance_id", "filename", "scene_id", "listener_id", "severity", "split"))]
    label_lines = ["\t".join(("utterance_id", "correct", "valid", "severity", "target_score"))]
    written = []
    for row in sorted(rows, key=lambda r: r.utterance_id):
        metadata, enc, mask, dec, attn = extract_utterance(row, backbone, config)
        filename = f"{row.utterance_id}.wlb"
        write_bundle_file(out_dir / filename, enc, mask, dec, attn, metadata)
        written.append(filename)
        index_lines.append(
            "\t".join((row.utterance_id, filename, row.scene_id, row.listener_id, row.severity, row.split))
        )
        labels = metadata["labels"]
        target = metadata["target_score"]
        label_lines.append(
            "\t".join(
                (
                    row.utterance_id,
                    "".join(str(c) for c in labels["correct"]),
                    "".join(str(m) for m in labels["valid"]),
                    row.severity,
                    "" if target is None else repr(float(target)),
                )
            )
        )
    (out_dir / "index.tsv").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    (out_dir / "labels.tsv").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    return written
