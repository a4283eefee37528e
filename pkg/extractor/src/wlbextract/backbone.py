"""Frozen backbones: encoder, teacher-forced decoder, cross-attention capture.

A backbone owns its tokenizers and produces encoder states, final-layer
decoder states, and per-layer/head post-softmax cross-attention. The local
deterministic backbone runs anywhere and makes extraction testable without
model weights; the Whisper adapter requires torch + transformers plus
locally available weights.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .audio import PreparedAudio, log_mel_features


class BackboneUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    char_range: Optional[tuple[int, int]]  # empty range marks prompt tokens
    token_id: int

    @property
    def is_prompt(self) -> bool:
        return self.char_range is not None and self.char_range[0] == self.char_range[1]


def _sinusoid(length: int, dim: int) -> np.ndarray:
    position = np.arange(length)[:, None]
    rates = np.exp(-np.arange(0, dim, 2) * (np.log(10000.0) / max(dim - 2, 1)))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates)
    return table


class LocalDeterministicBackbone:
    """Small frozen encoder/decoder with genuine softmax cross-attention.

    All weights derive from fixed seeds, so extraction is bit-reproducible
    on any machine. The decoder is a two-layer, two-head cross-attention
    stack over the encoder states; rows of every attention map are softmax
    distributions over all window frames, padded frames included, exactly
    like a fixed-window encoder.
    """

    name = "toy"
    window_seconds = 30.0
    hop = 320
    n_mels = 26
    enc_dim = 32
    dec_dim = 32
    layers = 2
    heads = 2
    vocab_size = 4096

    def __init__(self) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([0xF005, 1]))

        def mat(*shape, scale):
            return (rng.standard_normal(shape) * scale).astype(np.float32)

        self._enc_w1 = mat(self.n_mels, 64, scale=0.2)
        self._enc_b1 = mat(64, scale=0.1)
        self._enc_w2 = mat(64, self.enc_dim, scale=0.2)
        self._enc_b2 = mat(self.enc_dim, scale=0.1)
        self._embed = mat(self.vocab_size, self.dec_dim, scale=0.5)
        head_dim = self.dec_dim // self.heads
        self._wq = mat(self.layers, self.dec_dim, self.heads * head_dim, scale=0.3)
        self._wk = mat(self.layers, self.enc_dim, self.heads * head_dim, scale=0.3)
        self._wv = mat(self.layers, self.enc_dim, self.heads * head_dim, scale=0.3)
        self._wo = mat(self.layers, self.heads * head_dim, self.dec_dim, scale=0.3)
        self._head_dim = head_dim

    # -- tokenizers ---------------------------------------------------------

    def _token_id(self, text: str) -> int:
        return zlib.crc32(text.encode("utf-8")) % self.vocab_size

    def prompt_tokens(self) -> list[Token]:
        return [
            Token("<|startoftranscript|>", (0, 0), self._token_id("<|startoftranscript|>")),
            Token("<|notimestamps|>", (0, 0), self._token_id("<|notimestamps|>")),
        ]

    def subword_tokens(self, text: str) -> list[Token]:
        """Word-aware chunking into pieces of at most three characters."""
        tokens = self.prompt_tokens()
        pos = 0
        for word in text.split(" "):
            start = pos
            for offset in range(0, len(word), 3):
                piece = word[offset : offset + 3]
                tokens.append(Token(piece, (start + offset, start + offset + len(piece)), self._token_id(piece)))
            pos = start + len(word) + 1
        return tokens

    def char_tokens(self, text: str) -> list[Token]:
        tokens = self.prompt_tokens()
        for i, ch in enumerate(text):
            tokens.append(Token(ch, (i, i + 1), self._token_id(f"char:{ch}")))
        return tokens

    # -- model passes -------------------------------------------------------

    def encode(self, prepared: PreparedAudio) -> tuple[np.ndarray, np.ndarray]:
        mel, mask = log_mel_features(prepared.samples, self.window_seconds, hop=self.hop, n_mels=self.n_mels)
        hidden = np.tanh(mel @ self._enc_w1 + self._enc_b1)
        states = hidden @ self._enc_w2 + self._enc_b2
        states = states + 0.1 * _sinusoid(states.shape[0], self.enc_dim).astype(np.float32)
        return states.astype(np.float32), mask

    def decode(self, encoder_states: np.ndarray, token_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Teacher-forced pass: final-layer states plus all attention maps."""
        n_frames = encoder_states.shape[0]
        x = self._embed[np.asarray(token_ids) % self.vocab_size]
        x = x + 0.1 * _sinusoid(len(token_ids), self.dec_dim).astype(np.float32)
        attention = np.zeros((self.layers, self.heads, len(token_ids), n_frames), dtype=np.float32)
        scale = np.float32(1.0 / np.sqrt(self._head_dim))
        for layer in range(self.layers):
            q = x @ self._wq[layer]
            k = encoder_states @ self._wk[layer]
            v = encoder_states @ self._wv[layer]
            contexts = []
            for head in range(self.heads):
                sl = slice(head * self._head_dim, (head + 1) * self._head_dim)
                logits = (q[:, sl] @ k[:, sl].T) * scale
                logits -= logits.max(axis=1, keepdims=True)
                weights = np.exp(logits)
                weights /= weights.sum(axis=1, keepdims=True)
                attention[layer, head] = weights
                contexts.append(weights @ v[:, sl])
            x = np.tanh(x + np.concatenate(contexts, axis=1) @ self._wo[layer])
        return x.astype(np.float32), attention


class WhisperBackbone:
    """Adapter over a locally available Whisper model via transformers.

    Loads lazily and raises BackboneUnavailable when torch/transformers or
    the weights are missing. Attention maps come out post-softmax per
    decoder layer and head; decoder states are the final layer's.
    """

    CHECKPOINTS = {"small_en": "openai/whisper-small.en", "medium": "openai/whisper-medium"}
    window_seconds = 30.0

    def __init__(self, size: str) -> None:
        if size not in self.CHECKPOINTS:
            raise BackboneUnavailable(f"unknown whisper size {size!r}")
        self.name = size
        try:
            import torch
            from transformers import WhisperModel, WhisperProcessor
        except ImportError as exc:
            raise BackboneUnavailable(f"torch/transformers not installed: {exc}") from exc
        try:
            self._processor = WhisperProcessor.from_pretrained(self.CHECKPOINTS[size])
            self._model = WhisperModel.from_pretrained(self.CHECKPOINTS[size])
        except Exception as exc:  # no weights available locally
            raise BackboneUnavailable(f"cannot load {self.CHECKPOINTS[size]}: {exc}") from exc
        self._torch = torch
        self._model.eval()
        self.enc_dim = self._model.config.d_model
        self.dec_dim = self._model.config.d_model
        self.layers = self._model.config.decoder_layers
        self.heads = self._model.config.decoder_attention_heads
        # encoder output stride: 2 mel frames = 320 samples at 16 kHz
        self.hop = 320

    def prompt_tokens(self) -> list[Token]:
        tok = self._processor.tokenizer
        ids = tok.convert_tokens_to_ids(["<|startoftranscript|>", "<|notimestamps|>"])
        return [
            Token("<|startoftranscript|>", (0, 0), ids[0]),
            Token("<|notimestamps|>", (0, 0), ids[1]),
        ]

    def subword_tokens(self, text: str) -> list[Token]:
        tok = self._processor.tokenizer
        encoded = tok(text, add_special_tokens=False, return_offsets_mapping=True)
        tokens = self.prompt_tokens()
        for token_id, (start, end) in zip(encoded["input_ids"], encoded["offset_mapping"]):
            piece = text[start:end]
            tokens.append(Token(piece, (start, end) if end > start else None, token_id))
        return tokens

    def char_tokens(self, text: str) -> list[Token]:
        tok = self._processor.tokenizer
        tokens = self.prompt_tokens()
        for i, ch in enumerate(text):
            ids = tok(ch, add_special_tokens=False)["input_ids"]
            for token_id in ids:
                tokens.append(Token(ch, (i, i + 1), token_id))
        return tokens

    def encode(self, prepared: PreparedAudio) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        features = self._processor(
            prepared.samples, sampling_rate=prepared.sample_rate, return_tensors="pt"
        ).input_features
        with torch.no_grad():
            states = self._model.encoder(features).last_hidden_state[0]
        n_frames = states.shape[0]
        n_valid = min(n_frames, max(1, -(-prepared.samples.size // self.hop)))
        mask = np.zeros(n_frames, dtype=np.uint8)
        mask[:n_valid] = 1
        return states.numpy().astype(np.float32), mask

    def decode(self, encoder_states: np.ndarray, token_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        ids = torch.tensor([token_ids], dtype=torch.long)
        enc = torch.tensor(encoder_states[None], dtype=torch.float32)
        with torch.no_grad():
            out = self._model.decoder(
                input_ids=ids,
                encoder_hidden_states=enc,
                output_attentions=True,
            )
        states = out.last_hidden_state[0].numpy().astype(np.float32)
        attention = np.stack([a[0].numpy() for a in out.cross_attentions]).astype(np.float32)
        return states, attention


def load_backbone(name: str):
    if name == "toy":
        return LocalDeterministicBackbone()
    return WhisperBackbone(name)
