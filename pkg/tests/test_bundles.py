import json
import struct

import numpy as np
import pytest

from wlpred import pooling
from wlpred.bundles import (
    FORMAT_VERSION,
    HEADER_LEN,
    MAGIC,
    CorruptManifest,
    FeatureBundle,
    InvalidDims,
    IndexEntry,
    PlantedSignalSpec,
    ShapeMismatch,
    SynthDims,
    UnsupportedVersion,
    ValidationFailure,
    load_dataset,
    make_synthetic_dataset,
    plant_direction,
    read_bundle,
    read_container,
    read_index,
    synthesize_bundle,
    validate_bundle,
    write_bundle,
    write_container,
    write_index,
)
from wlpred.textnorm import WordLabelSet


@pytest.fixture
def bundle():
    return synthesize_bundle(41)


class TestContainer:
    def test_round_trip(self, tmp_path, bundle):
        path = tmp_path / "b.wlb"
        write_bundle(bundle, path)
        back = read_bundle(path)
        assert np.array_equal(back.encoder_states, bundle.encoder_states)
        assert back.encoder_states.dtype == np.float32
        assert np.array_equal(back.encoder_mask, bundle.encoder_mask)
        assert np.array_equal(back.decoder_states, bundle.decoder_states)
        assert np.array_equal(back.cross_attention, bundle.cross_attention)
        assert back.token_spans == bundle.token_spans
        assert back.char_rows == bundle.char_rows
        assert back.labels.correct == bundle.labels.correct
        assert back.labels.valid == bundle.labels.valid
        assert back.target_score == bundle.target_score
        assert back.severity == bundle.severity
        assert back.utterance_id == bundle.utterance_id

    def test_writes_are_byte_identical(self, tmp_path, bundle):
        p1, p2 = tmp_path / "a.wlb", tmp_path / "b.wlb"
        write_bundle(bundle, p1)
        write_bundle(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_matches_manifest(self, tmp_path, bundle):
        path = tmp_path / "b.wlb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + mlen])
        declared = sum(e["length"] for e in manifest["tensors"])
        assert len(raw) == HEADER_LEN + mlen + declared

    def test_truncated_payload_rejected(self, tmp_path, bundle):
        path = tmp_path / "b.wlb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CorruptManifest):
            read_bundle(path)

    def test_bad_magic_rejected(self, tmp_path, bundle):
        path = tmp_path / "b.wlb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CorruptManifest):
            read_bundle(path)

    def test_unsupported_version(self, tmp_path, bundle):
        path = tmp_path / "b.wlb"
        write_bundle(bundle, path)
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + mlen])
        manifest["format_version"] = 999
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + raw[12 + mlen :])
        with pytest.raises(UnsupportedVersion):
            read_bundle(path)

    def test_unknown_manifest_keys_ignored(self, tmp_path):
        path = tmp_path / "c.wlb"
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_container(path, [("x", arr)], {"kind": "other"})
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + mlen])
        manifest["future_extension"] = {"nested": True}
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + raw[12 + mlen :])
        tensors, metadata = read_container(path)
        assert np.array_equal(tensors["x"], arr)
        assert metadata == {"kind": "other"}

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "c.wlb"
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_container(path, [("x", arr)], {})
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12 : 12 + mlen])
        manifest["tensors"][0]["shape"] = [4, 3]
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + raw[12 + mlen :])
        with pytest.raises(ShapeMismatch):
            read_container(path)

    def test_format_version_is_one(self):
        assert FORMAT_VERSION == 1


class TestValidation:
    def test_mask_length_mismatch(self, bundle):
        bundle.encoder_mask = np.ones(bundle.n_frames + 1, dtype=np.uint8)
        with pytest.raises(ValidationFailure):
            validate_bundle(bundle)

    def test_write_refuses_invalid(self, tmp_path, bundle):
        bundle.encoder_mask = np.zeros(bundle.n_frames, dtype=np.uint8)
        with pytest.raises(ValidationFailure):
            write_bundle(bundle, tmp_path / "bad.wlb")

    def test_correct_at_masked_position_rejected(self, bundle):
        bundle.labels = WordLabelSet(
            correct=[1] + bundle.labels.correct[1:], valid=[0] + bundle.labels.valid[1:]
        )
        with pytest.raises(ValidationFailure):
            validate_bundle(bundle)

    def test_attention_row_sums_checked(self, bundle):
        bundle.cross_attention = bundle.cross_attention * np.float32(2.0)
        with pytest.raises(ValidationFailure, match="sum to 1"):
            validate_bundle(bundle)

    def test_non_softmax_attention_tolerated(self, bundle):
        bundle.cross_attention = bundle.cross_attention * np.float32(2.0)
        bundle.attention_is_softmax = False
        validate_bundle(bundle)

    def test_require_attention(self, bundle):
        bundle.cross_attention = None
        validate_bundle(bundle)
        with pytest.raises(ValidationFailure, match="required"):
            validate_bundle(bundle, require_attention=True)

    def test_overlapping_token_spans_rejected(self, bundle):
        bundle.token_spans = [list(span) for span in bundle.token_spans]
        bundle.token_spans[1] = bundle.token_spans[0]
        with pytest.raises(ValidationFailure, match="used twice"):
            validate_bundle(bundle)

    def test_target_score_range(self, bundle):
        bundle.target_score = 101.0
        with pytest.raises(ValidationFailure):
            validate_bundle(bundle)


class TestSynthesis:
    def test_deterministic(self):
        a = synthesize_bundle(11)
        b = synthesize_bundle(11)
        assert a.utterance_id == b.utterance_id
        assert np.array_equal(a.encoder_states, b.encoder_states)
        assert np.array_equal(a.decoder_states, b.decoder_states)
        assert np.array_equal(a.cross_attention, b.cross_attention)
        assert a.labels.correct == b.labels.correct
        assert a.severity == b.severity

    def test_different_seeds_differ(self):
        a = synthesize_bundle(11)
        b = synthesize_bundle(12)
        assert not np.array_equal(a.encoder_states, b.encoder_states)

    def test_target_score_is_masked_mean(self):
        b = synthesize_bundle(3)
        assert b.target_score == pytest.approx(100.0 * np.mean(b.labels.correct), abs=1e-9)

    def test_target_score_two_thirds(self):
        from wlpred.training import sentence_score

        score = sentence_score(np.array([1.0, 0.0, 1.0]), np.array([1.0, 1.0, 1.0]))
        assert score == pytest.approx(200.0 / 3.0, abs=1e-9)

    def test_all_modes_validate(self):
        for mode in ("decoder", "local", "noise"):
            b = synthesize_bundle(5, planted=PlantedSignalSpec(mode=mode))
            validate_bundle(b)

    def test_invalid_dims(self):
        with pytest.raises(InvalidDims):
            synthesize_bundle(1, dims=SynthDims(words=30, tokens=24))
        with pytest.raises(InvalidDims):
            synthesize_bundle(1, dims=SynthDims(frames=4, words=8))

    def test_decoder_plant_follows_direction(self):
        b = synthesize_bundle(9, planted=PlantedSignalSpec(mode="decoder"))
        v = plant_direction(b.decoder_states.shape[1], "decoder").astype(np.float64)
        for i, span in enumerate(b.token_spans):
            d = b.decoder_states[span].astype(np.float64).mean(axis=0)
            assert (float(v @ d) > 0) == bool(b.labels.correct[i])

    def test_local_plant_independent_of_decoder_states(self):
        # labels must carry no linear signal readable from decoder features
        dots, labels = [], []
        u = plant_direction(SynthDims().dec_dim, "local").astype(np.float64)
        i = 0
        while len(labels) < 1000:
            b = synthesize_bundle(10_000 + i, planted=PlantedSignalSpec(mode="local"))
            for w, span in enumerate(b.token_spans):
                d = b.decoder_states[span].astype(np.float64).mean(axis=0)
                dots.append(float(u @ d))
                labels.append(b.labels.correct[w])
            i += 1
        corr = np.corrcoef(np.asarray(dots), np.asarray(labels, dtype=np.float64))[0, 1]
        assert abs(corr) < 0.1

    def test_masked_frames_have_no_attention_mass(self):
        b = synthesize_bundle(4, planted=PlantedSignalSpec(mode="local"))
        masked = b.encoder_mask == 0
        assert masked.any()
        assert float(np.abs(b.cross_attention[..., masked]).max()) == 0.0


class TestDataset:
    def test_index_round_trip(self, tmp_path):
        entries = [
            IndexEntry("u1", "u1.wlb", "S0", "L0", "mild", "train"),
            IndexEntry("u2", "u2.wlb", "S1", "L1", "moderate", "dev"),
        ]
        write_index(entries, tmp_path / "index.tsv")
        assert read_index(tmp_path / "index.tsv") == entries

    def test_make_dataset(self, tmp_path):
        entries = make_synthetic_dataset(tmp_path, base_seed=3, count=12, n_scenes=6)
        assert len(entries) == 12
        assert (tmp_path / "index.tsv").exists()
        assert (tmp_path / "labels.tsv").exists()
        data = load_dataset(tmp_path)
        assert [b.utterance_id for b in data] == sorted(b.utterance_id for b in data)
        assert len(data) == 12
        splits = {e.split for e in entries}
        assert splits == {"train", "dev"}
        # scene grouping: every utterance of a scene shares the split
        by_scene = {}
        for e in entries:
            by_scene.setdefault(e.scene_id, set()).add(e.split)
        assert all(len(s) == 1 for s in by_scene.values())

    def test_load_dataset_split_filter(self, tmp_path):
        entries = make_synthetic_dataset(tmp_path, base_seed=3, count=12, n_scenes=6)
        train = load_dataset(tmp_path, split="train")
        dev = load_dataset(tmp_path, split="dev")
        assert len(train) + len(dev) == len(entries)
        assert all(isinstance(b, FeatureBundle) for b in train)
