import wave

import numpy as np
import pytest


def write_wav(path, seconds, rate, channels, seed):
    """Tone-plus-noise test signal, 16-bit PCM."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    freq = float(rng.uniform(150, 900))
    signal = 0.4 * np.sin(2 * np.pi * freq * t) + 0.1 * rng.standard_normal(t.size)
    data = np.clip(signal, -1.0, 1.0)
    if channels == 2:
        data = np.stack([data, 0.5 * data], axis=1)
    pcm = (data * 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())
    return path


ROWS = [
    # utterance_id, transcript, response, scene, listener, severity, split, rate, channels, seconds
    ("utt-000", "The quick brown fox jumps", "the quick brown fox jumps", "S0", "L0", "mild", "train", 16000, 1, 1.2),
    ("utt-001", "Don't stop the music!", "don't stop a music", "S1", "L1", "moderate", "train", 22050, 2, 1.5),
    ("utt-002", "A/B testing is hard", "a testing is hard", "S2", "L0", "moderately_severe", "train", 44100, 2, 1.1),
    ("utt-003", "Seven silver swans swam", "seven swans swam", "S3", "L2", "mild", "train", 16000, 2, 1.8),
    ("utt-004", "He heard it clearly", "he heard it", "S4", "L1", "moderate", "train", 22050, 1, 1.3),
    ("utt-005", "Green ideas sleep furiously", "green ideas sleep furiously", "S5", "L2", "unknown", "dev", 16000, 1, 1.4),
]


@pytest.fixture(scope="session")
def dataset_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("audio")
    lines = []
    for i, (utt, transcript, response, scene, listener, severity, split, rate, channels, seconds) in enumerate(ROWS):
        wav = write_wav(root / f"{utt}.wav", seconds, rate, channels, seed=100 + i)
        lines.append(
            "\t".join((utt, str(wav), transcript, response, scene, listener, severity, split))
        )
    index = root / "dataset.tsv"
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index
