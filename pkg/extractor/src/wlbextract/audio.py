"""Audio loading and the fixed preprocessing policy.

Every input is channel-averaged to mono, resampled to 16 kHz, and truncated
to at most 30 seconds before feature extraction.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

TARGET_RATE = 16000
MAX_SECONDS = 30.0


class UnreadableAudio(ValueError):
    pass


_PCM_SCALE = {1: 127.0, 2: 32768.0, 4: 2147483648.0}


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file as float64 samples shaped (frames, channels)."""
    try:
        with wave.open(str(path), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            frames = wav.getnframes()
            raw = wav.readframes(frames)
    except (OSError, wave.Error, EOFError) as exc:
        raise UnreadableAudio(f"{path}: {exc}") from exc
    if width == 1:
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64)
    else:
        raise UnreadableAudio(f"{path}: unsupported sample width {width}")
    if channels < 1 or data.size % channels:
        raise UnreadableAudio(f"{path}: malformed channel layout")
    return data.reshape(-1, channels) / _PCM_SCALE[width], rate


@dataclass(frozen=True)
class PreparedAudio:
    samples: np.ndarray  # mono float32 at TARGET_RATE, <= MAX_SECONDS
    sample_rate: int
    original_seconds: float


def preprocess_audio(path) -> PreparedAudio:
    """Mono mix, 16 kHz resample, 30 s truncation."""
    data, rate = read_wav(path)
    if data.size == 0:
        raise UnreadableAudio(f"{path}: empty audio")
    mono = data.mean(axis=1)
    original_seconds = mono.size / rate
    if rate != TARGET_RATE:
        g = math.gcd(TARGET_RATE, rate)
        mono = resample_poly(mono, TARGET_RATE // g, rate // g)
    limit = int(MAX_SECONDS * TARGET_RATE)
    mono = mono[:limit]
    return PreparedAudio(
        samples=mono.astype(np.float32),
        sample_rate=TARGET_RATE,
        original_seconds=original_seconds,
    )


def mel_filterbank(n_filters: int, n_fft: int, rate: int) -> np.ndarray:
    """Triangular filters on the mel scale over the rfft bins."""

    def to_mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def from_mel(mel):
        return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)

    points = from_mel(np.linspace(0.0, to_mel(rate / 2.0), n_filters + 2))
    bins = np.floor((n_fft + 1) * points / rate).astype(int)
    bank = np.zeros((n_filters, n_fft // 2 + 1))
    for i in range(n_filters):
        left, center, right = bins[i], bins[i + 1], bins[i + 2]
        center = max(center, left + 1)
        right = max(right, center + 1)
        bank[i, left:center] = (np.arange(left, center) - left) / (center - left)
        bank[i, center:right] = (right - np.arange(center, right)) / (right - center)
    return bank


def log_mel_features(
    samples: np.ndarray,
    window_seconds: float,
    hop: int = 320,
    win: int = 400,
    n_fft: int = 512,
    n_mels: int = 26,
) -> tuple[np.ndarray, np.ndarray]:
    """Log-mel features over a fixed zero-padded window plus a frame mask.

    Returns (features (L, n_mels) float32, mask (L,) uint8) where L is the
    window length in hops; mask marks frames that cover real samples.
    """
    total = int(window_seconds * TARGET_RATE)
    n_valid = min(max(1, math.ceil(samples.size / hop)), total // hop)
    padded = np.zeros(total, dtype=np.float64)
    padded[: samples.size] = samples[:total]
    n_frames = total // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.where(idx < total, padded[np.minimum(idx, total - 1)], 0.0)
    frames = frames * np.hanning(win)
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bank = mel_filterbank(n_mels, n_fft, TARGET_RATE)
    mel = np.log10(spectrum @ bank.T + 1e-10)
    mask = np.zeros(n_frames, dtype=np.uint8)
    mask[:n_valid] = 1
    return mel.astype(np.float32), mask
