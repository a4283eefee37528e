"""Writer for the feature-bundle interchange format.

Layout: ``WLB1`` magic, 8-byte little-endian manifest length, compact UTF-8
JSON manifest (format_version, tensors[], metadata), then raw little-endian
tensor payloads at the declared offsets. The consumer validates these files
byte-for-byte, so writing is fully deterministic.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"WLB1"
FORMAT_VERSION = 1

_DTYPE_NAMES = {"float32": "<f4", "uint8": "|u1"}


def write_bundle_file(
    path,
    encoder_states: np.ndarray,
    encoder_mask: np.ndarray,
    decoder_states: np.ndarray,
    cross_attention: np.ndarray,
    metadata: dict,
) -> None:
    tensors = [
        ("encoder_states", encoder_states, "float32"),
        ("encoder_mask", encoder_mask, "uint8"),
        ("decoder_states", decoder_states, "float32"),
        ("cross_attention", cross_attention, "float32"),
    ]
    entries = []
    chunks = []
    offset = 0
    for name, array, dtype_name in tensors:
        data = np.ascontiguousarray(array, dtype=np.dtype(_DTYPE_NAMES[dtype_name])).tobytes()
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
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for chunk in chunks:
            f.write(chunk)


def read_manifest(path) -> dict:
    """Parse just the manifest; used for self-checks after writing."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic")
        (mlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(mlen).decode("utf-8"))
