"""Feature-bundle container: on-disk format, validation, indexing, synthesis.

File layout: magic ``WLB1``, an 8-byte little-endian manifest length, the
manifest as compact UTF-8 JSON (format_version, tensors[], metadata), then
raw little-endian tensor payloads at the declared offsets. Writing the same
bundle twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pooling
from .metrics import TruthRecord, write_labels_file
from .textnorm import WordLabelSet

MAGIC = b"WLB1"
FORMAT_VERSION = 1
HEADER_LEN = len(MAGIC) + 8

SEVERITIES = ("mild", "moderate", "moderately_severe", "unknown")
SEVERITY_INDEX = {name: i for i, name in enumerate(SEVERITIES)}

ATTENTION_ROW_SUM_TOL = 1e-3


class BundleError(Exception):
    pass


class IoFailure(BundleError):
    pass


class CorruptManifest(BundleError):
    pass


class UnsupportedVersion(BundleError):
    pass


class ShapeMismatch(BundleError):
    pass


class ValidationFailure(BundleError):
    pass


class InvalidDims(BundleError):
    pass


_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("|u1"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def write_container(path, tensors: Sequence[tuple[str, np.ndarray]], metadata: dict) -> None:
    """Write named tensors plus a JSON metadata block; byte-deterministic."""
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors:
        dtype_name = _DTYPE_NAMES.get(np.dtype(array.dtype).newbyteorder("<"))
        if dtype_name is None:
            raise ValueError(f"unsupported tensor dtype {array.dtype} for {name!r}")
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": [int(s) for s in array.shape],
                "offset": offset,
                "length": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "metadata": metadata}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for chunk in chunks:
                f.write(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, metadata); unknown manifest keys are ignored."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < HEADER_LEN or data[:4] != MAGIC:
        raise CorruptManifest(f"{path}: missing WLB1 magic")
    (manifest_len,) = struct.unpack("<Q", data[4:HEADER_LEN])
    if HEADER_LEN + manifest_len > len(data):
        raise CorruptManifest(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[HEADER_LEN : HEADER_LEN + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CorruptManifest(f"{path}: manifest lacks format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format_version {manifest['format_version']}")
    entries = manifest.get("tensors", [])
    payload = data[HEADER_LEN + manifest_len :]
    expected = 0
    for entry in sorted(entries, key=lambda e: e["offset"]):
        if entry["offset"] != expected:
            raise CorruptManifest(f"{path}: tensor offsets overlap or leave gaps")
        expected += entry["length"]
    if expected != len(payload):
        raise CorruptManifest(
            f"{path}: payload is {len(payload)} bytes, manifest declares {expected}"
        )
    tensors = {}
    for entry in entries:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CorruptManifest(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if nbytes != entry["length"]:
            raise ShapeMismatch(
                f"{path}: tensor {entry['name']!r} declares shape {shape} "
                f"but {entry['length']} bytes"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    metadata = manifest.get("metadata", {})
    if not isinstance(metadata, dict):
        raise CorruptManifest(f"{path}: metadata block is not an object")
    return tensors, metadata


@dataclass
class FeatureBundle:
    """All frozen-model tensors, maps, labels, and metadata for one utterance."""

    utterance_id: str
    scene_id: str
    listener_id: str
    severity: str
    encoder_states: np.ndarray  # (L, D_e) float32
    encoder_mask: np.ndarray  # (L,) uint8
    decoder_states: np.ndarray  # (T, D_h) float32
    token_spans: list[list[int]]  # per word, decoder token indices
    char_rows: list[list[int]]  # per word, rows in the alignment sequence
    labels: WordLabelSet
    alignment_len: int  # U, rows of the character-level alignment sequence
    cross_attention: Optional[np.ndarray] = None  # (layers, heads, U, L) float32
    target_score: Optional[float] = None
    attention_is_softmax: bool = True

    @property
    def n_words(self) -> int:
        return len(self.labels.correct)

    @property
    def n_frames(self) -> int:
        return int(self.encoder_states.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.decoder_states.shape[0])

    @property
    def severity_index(self) -> int:
        return SEVERITY_INDEX[self.severity]


def _check_spans(spans, upper, what, problems) -> None:
    seen: set[int] = set()
    for word, span in enumerate(spans):
        for idx in span:
            if not (0 <= int(idx) < upper):
                problems.append(f"{what}[{word}] index {idx} out of range [0, {upper})")
            elif int(idx) in seen:
                problems.append(f"{what}[{word}] index {idx} used twice")
            seen.add(int(idx))


def validate_bundle(bundle: FeatureBundle, require_attention: bool = False) -> None:
    """Raise ValidationFailure describing every violated invariant."""
    problems: list[str] = []
    if bundle.severity not in SEVERITIES:
        problems.append(f"unknown severity {bundle.severity!r}")
    enc = bundle.encoder_states
    mask = bundle.encoder_mask
    dec = bundle.decoder_states
    if enc.ndim != 2 or enc.dtype != np.float32:
        problems.append("encoder_states must be float32 with shape (L, D_e)")
    if mask.ndim != 1 or mask.shape[0] != enc.shape[0]:
        problems.append("encoder_mask length must equal encoder frames")
    elif not np.isin(mask, (0, 1)).all():
        problems.append("encoder_mask must be binary")
    elif int(mask.sum()) < 1:
        problems.append("encoder_mask must keep at least one frame")
    if dec.ndim != 2 or dec.dtype != np.float32:
        problems.append("decoder_states must be float32 with shape (T, D_h)")
    n_words = len(bundle.labels.correct)
    if not (len(bundle.token_spans) == len(bundle.char_rows) == n_words == len(bundle.labels.valid)):
        problems.append("token_spans, char_rows and labels must all cover N words")
    else:
        _check_spans(bundle.token_spans, dec.shape[0], "token_spans", problems)
        _check_spans(bundle.char_rows, bundle.alignment_len, "char_rows", problems)
        for i, (c, m) in enumerate(zip(bundle.labels.correct, bundle.labels.valid)):
            if c not in (0, 1) or m not in (0, 1):
                problems.append(f"labels[{i}] must be binary")
            elif m == 0 and c != 0:
                problems.append(f"labels[{i}] stores correct={c} at a masked position")
    if bundle.alignment_len < 1:
        problems.append("alignment_len must be >= 1")
    attn = bundle.cross_attention
    if attn is None:
        if require_attention:
            problems.append("cross_attention required by the run configuration but absent")
    else:
        if attn.ndim != 4 or attn.dtype != np.float32:
            problems.append("cross_attention must be float32 (layers, heads, U, L)")
        else:
            if attn.shape[2] != bundle.alignment_len:
                problems.append("cross_attention U does not match alignment_len")
            if attn.shape[3] != enc.shape[0]:
                problems.append("cross_attention L does not match encoder frames")
            if not np.isfinite(attn).all():
                problems.append("cross_attention contains non-finite values")
            elif bundle.attention_is_softmax and attn.size:
                row_sums = attn.astype(np.float64).sum(axis=3)
                worst = float(np.abs(row_sums - 1.0).max())
                if worst > ATTENTION_ROW_SUM_TOL:
                    problems.append(
                        f"softmax attention rows must sum to 1 (worst deviation {worst:.2e})"
                    )
    if bundle.target_score is not None and not (0.0 <= bundle.target_score <= 100.0):
        problems.append(f"target_score {bundle.target_score} outside [0, 100]")
    if problems:
        raise ValidationFailure(f"{bundle.utterance_id}: " + "; ".join(problems))


def write_bundle(bundle: FeatureBundle, path, require_attention: bool = False) -> None:
    validate_bundle(bundle, require_attention=require_attention)
    tensors = [
        ("encoder_states", bundle.encoder_states),
        ("encoder_mask", bundle.encoder_mask.astype(np.uint8)),
        ("decoder_states", bundle.decoder_states),
    ]
    if bundle.cross_attention is not None:
        tensors.append(("cross_attention", bundle.cross_attention))
    metadata = {
        "kind": "feature_bundle",
        "utterance_id": bundle.utterance_id,
        "scene_id": bundle.scene_id,
        "listener_id": bundle.listener_id,
        "severity": bundle.severity,
        "token_spans": [[int(i) for i in span] for span in bundle.token_spans],
        "char_rows": [[int(i) for i in span] for span in bundle.char_rows],
        "labels": {
            "correct": [int(c) for c in bundle.labels.correct],
            "valid": [int(m) for m in bundle.labels.valid],
        },
        "alignment_len": int(bundle.alignment_len),
        "attention_is_softmax": bool(bundle.attention_is_softmax),
        "target_score": None if bundle.target_score is None else float(bundle.target_score),
    }
    write_container(path, tensors, metadata)


def read_bundle(path) -> FeatureBundle:
    tensors, metadata = read_container(path)
    try:
        labels = WordLabelSet(
            correct=[int(c) for c in metadata["labels"]["correct"]],
            valid=[int(m) for m in metadata["labels"]["valid"]],
        )
        bundle = FeatureBundle(
            utterance_id=metadata["utterance_id"],
            scene_id=metadata["scene_id"],
            listener_id=metadata["listener_id"],
            severity=metadata["severity"],
            encoder_states=tensors["encoder_states"],
            encoder_mask=tensors["encoder_mask"],
            decoder_states=tensors["decoder_states"],
            token_spans=[list(map(int, span)) for span in metadata["token_spans"]],
            char_rows=[list(map(int, span)) for span in metadata["char_rows"]],
            labels=labels,
            alignment_len=int(metadata["alignment_len"]),
            cross_attention=tensors.get("cross_attention"),
            target_score=metadata.get("target_score"),
            attention_is_softmax=bool(metadata.get("attention_is_softmax", True)),
        )
    except KeyError as exc:
        raise CorruptManifest(f"{path}: missing metadata field {exc}") from exc
    validate_bundle(bundle)
    return bundle


# ---------------------------------------------------------------------------
# Dataset index
# ---------------------------------------------------------------------------

INDEX_COLUMNS = ("utterance_id", "filename", "scene_id", "listener_id", "severity", "split")


@dataclass(frozen=True)
class IndexEntry:
    utterance_id: str
    filename: str
    scene_id: str
    listener_id: str
    severity: str
    split: str


def write_index(entries: Sequence[IndexEntry], path) -> None:
    lines = ["\t".join(INDEX_COLUMNS)]
    for e in entries:
        lines.append(
            "\t".join((e.utterance_id, e.filename, e.scene_id, e.listener_id, e.severity, e.split))
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_index(path) -> list[IndexEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header.split("\t") != list(INDEX_COLUMNS):
            raise ValueError(f"{path}: unexpected index header {header!r}")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != len(INDEX_COLUMNS):
                raise ValueError(f"{path}: malformed index row {line!r}")
            entries.append(IndexEntry(*fields))
    return entries


def load_dataset(data_dir, split: Optional[str] = None) -> list[FeatureBundle]:
    """Read every bundle named by the index, sorted by utterance id."""
    data_dir = Path(data_dir)
    entries = read_index(data_dir / "index.tsv")
    if split is not None:
        entries = [e for e in entries if e.split == split]
    entries.sort(key=lambda e: e.utterance_id)
    return [read_bundle(data_dir / e.filename) for e in entries]


# ---------------------------------------------------------------------------
# Synthetic bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthDims:
    frames: int = 24  # L
    enc_dim: int = 16  # D_e
    tokens: int = 24  # T
    dec_dim: int = 16  # D_h
    layers: int = 2
    heads: int = 2
    words: int = 8  # N
    align_len: int = 24  # U


PLANT_MODES = ("decoder", "local", "noise")


@dataclass(frozen=True)
class PlantedSignalSpec:
    """Where the ground-truth signal lives in a synthetic bundle.

    decoder: labels follow the sign of a fixed direction against the word's
    decoder state. local: labels follow a fixed direction against the
    attention-pooled encoder summary and are independent of decoder states.
    noise: labels are coin flips.
    """

    mode: str = "decoder"
    margin: float = 2.0
    top_k: int = 10
    masked_tail_fraction: float = 0.1


def plant_direction(dim: int, mode: str) -> np.ndarray:
    """Fixed unit vector shared by every bundle of one plant mode."""
    tag = {"decoder": 1, "local": 2}[mode]
    rng = np.random.default_rng(np.random.SeedSequence([0x77AB1E, tag, dim]))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def _partition(total: int, parts: int) -> list[tuple[int, int]]:
    base, extra = divmod(total, parts)
    spans = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        spans.append((start, start + size))
        start += size
    return spans


def synthesize_bundle(
    seed: int,
    dims: SynthDims = SynthDims(),
    planted: PlantedSignalSpec = PlantedSignalSpec(),
    utterance_id: Optional[str] = None,
    scene_id: str = "scene-000",
    listener_id: str = "listener-000",
    severity: Optional[str] = None,
) -> FeatureBundle:
    """Deterministic pseudo-random bundle with a planted ground-truth signal."""
    if planted.mode not in PLANT_MODES:
        raise InvalidDims(f"unknown plant mode {planted.mode!r}")
    d = dims
    if min(d.frames, d.enc_dim, d.tokens, d.dec_dim, d.layers, d.heads, d.words, d.align_len) < 1:
        raise InvalidDims("all dimensions must be positive")
    if d.words > d.tokens or d.words > d.align_len:
        raise InvalidDims("need words <= tokens and words <= align_len")
    valid_frames = d.frames - int(planted.masked_tail_fraction * d.frames)
    if valid_frames < d.words:
        raise InvalidDims("not enough valid frames for one block per word")

    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed)]))
    mask = np.zeros(d.frames, dtype=np.uint8)
    mask[:valid_frames] = 1

    token_spans = [list(range(s, e)) for s, e in _partition(d.tokens, d.words)]
    char_rows = [list(range(s, e)) for s, e in _partition(d.align_len, d.words)]
    blocks = _partition(valid_frames, d.words)

    encoder_states = rng.standard_normal((d.frames, d.enc_dim)).astype(np.float32)
    decoder_states = rng.standard_normal((d.tokens, d.dec_dim)).astype(np.float32)

    # Near-monotonic attention: each word's character rows put all their mass
    # on a bump inside that word's own frame block, identically across heads
    # up to center jitter, so head selection never moves mass between blocks.
    attention = np.zeros((d.layers, d.heads, d.align_len, d.frames), dtype=np.float32)
    for word, (bs, be) in enumerate(blocks):
        width = be - bs
        frames = np.arange(bs, be, dtype=np.float64)
        for layer in range(d.layers):
            for head in range(d.heads):
                center = bs + (width - 1) * rng.uniform(0.25, 0.75)
                sigma = max(width / 4.0, 0.6)
                bump = np.exp(-0.5 * ((frames - center) / sigma) ** 2)
                bump /= bump.sum()
                attention[layer, head, char_rows[word][0] : char_rows[word][-1] + 1, bs:be] = bump

    correct = [0] * d.words
    if planted.mode == "decoder":
        v = plant_direction(d.dec_dim, "decoder").astype(np.float64)
        for word, span in enumerate(token_spans):
            raw = decoder_states[span].astype(np.float64).mean(axis=0)
            sign = 1.0 if float(v @ raw) > 0 else -1.0
            decoder_states[span] += (planted.margin * sign * v).astype(np.float32)
            final, _ = pooling.decoder_word_state(decoder_states, span)
            correct[word] = 1 if float(v @ final) > 0 else 0
    elif planted.mode == "local":
        u = plant_direction(d.enc_dim, "local").astype(np.float64)
        k = min(planted.top_k, d.layers * d.heads)
        selection = pooling.select_top_heads(attention, k)
        profiles = [
            pooling.word_attention_profile(attention, selection, char_rows[w], mask, word_index=w)
            for w in range(d.words)
        ]
        for word, (bs, be) in enumerate(blocks):
            raw = pooling.local_pool(profiles[word], encoder_states)
            sign = 1.0 if float(u @ raw) > 0 else -1.0
            encoder_states[bs:be] += (planted.margin * sign * u).astype(np.float32)
            final = pooling.local_pool(profiles[word], encoder_states)
            correct[word] = 1 if float(u @ final) > 0 else 0
    else:
        correct = [int(x) for x in rng.integers(0, 2, d.words)]

    severity_draw = SEVERITIES[int(rng.integers(0, len(SEVERITIES)))]
    labels = WordLabelSet(correct=correct, valid=[1] * d.words)
    bundle = FeatureBundle(
        utterance_id=utterance_id or f"synth-{int(seed):010d}",
        scene_id=scene_id,
        listener_id=listener_id,
        severity=severity if severity is not None else severity_draw,
        encoder_states=encoder_states,
        encoder_mask=mask,
        decoder_states=decoder_states,
        token_spans=token_spans,
        char_rows=char_rows,
        labels=labels,
        alignment_len=d.align_len,
        cross_attention=attention,
        target_score=100.0 * float(np.mean(correct)),
        attention_is_softmax=True,
    )
    validate_bundle(bundle)
    return bundle


def make_synthetic_dataset(
    out_dir,
    base_seed: int,
    count: int,
    planted: PlantedSignalSpec = PlantedSignalSpec(),
    dims: SynthDims = SynthDims(),
    n_scenes: Optional[int] = None,
    n_listeners: int = 4,
    dev_fraction: float = 0.2,
) -> list[IndexEntry]:
    """Write ``count`` synthetic bundles plus index.tsv and labels.tsv.

    Scenes are dealt round-robin; a deterministic subset of scenes becomes
    the dev split, the rest train.
    """
    if count < 1:
        raise InvalidDims("count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n_scenes is None:
        n_scenes = max(8, count // 8)
    n_scenes = min(n_scenes, count)
    scene_names = [f"S{i:03d}" for i in range(n_scenes)]
    rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, int(base_seed)]))
    n_dev = int(round(dev_fraction * n_scenes))
    dev_scenes = set(rng.permutation(scene_names)[:n_dev])

    entries = []
    truths = []
    for i in range(count):
        child_seed = int(np.random.SeedSequence([int(base_seed), i]).generate_state(1)[0])
        scene = scene_names[i % n_scenes]
        listener = f"L{int(rng.integers(0, n_listeners)):03d}"
        utt_id = f"utt-{int(base_seed):04d}-{i:05d}"
        bundle = synthesize_bundle(
            child_seed,
            dims=dims,
            planted=planted,
            utterance_id=utt_id,
            scene_id=scene,
            listener_id=listener,
        )
        filename = f"{utt_id}.wlb"
        write_bundle(bundle, out_dir / filename)
        entries.append(
            IndexEntry(
                utterance_id=utt_id,
                filename=filename,
                scene_id=scene,
                listener_id=listener,
                severity=bundle.severity,
                split="dev" if scene in dev_scenes else "train",
            )
        )
        truths.append(
            TruthRecord(
                utterance_id=utt_id,
                correct=np.array(bundle.labels.correct, dtype=np.int8),
                valid=np.array(bundle.labels.valid, dtype=np.int8),
                severity=bundle.severity,
                target_score=bundle.target_score,
            )
        )
    write_index(entries, out_dir / "index.tsv")
    write_labels_file(out_dir / "labels.tsv", truths)
    return entries
