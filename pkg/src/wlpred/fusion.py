"""Trainable fusion head over frozen features.

Per-branch linear projections into a shared space, a severity embedding,
and a LayerNorm-Linear-GELU-Dropout-Linear classifier producing one logit
per reference word. Training minimizes masked binary cross-entropy;
gradients are analytic and verified against finite differences. Parameters
are stored in float32; losses and metrics accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from . import pooling
from .bundles import SEVERITY_INDEX, FeatureBundle
from .metrics import NoValidWords

MODES = ("decoder_only", "local", "global", "joint")

N_SEVERITIES = len(SEVERITY_INDEX)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class MissingAttention(ValueError):
    """The mode needs the local branch but the bundle has no attention."""


class NonFiniteActivation(FloatingPointError):
    """Forward produced NaN or infinity."""


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "joint"
    proj_dim: int = 256
    severity_dim: int = 128
    hidden_dim: int = 256
    dropout_rate: float = 0.1
    layernorm_epsilon: float = 1e-5
    attention_top_k: int = 10

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.proj_dim, self.severity_dim, self.hidden_dim) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def uses_local(self) -> bool:
        return self.mode in ("local", "joint")

    @property
    def uses_global(self) -> bool:
        return self.mode in ("global", "joint")

    @property
    def fused_dim(self) -> int:
        branches = 1 + int(self.uses_local) + int(self.uses_global)
        return branches * self.proj_dim + self.severity_dim

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "proj_dim": self.proj_dim,
            "severity_dim": self.severity_dim,
            "hidden_dim": self.hidden_dim,
            "dropout_rate": self.dropout_rate,
            "layernorm_epsilon": self.layernorm_epsilon,
            "attention_top_k": self.attention_top_k,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        return cls(**data)


@dataclass
class UtteranceFeatures:
    """Per-word inputs for one utterance, in float32 storage."""

    utterance_id: str
    decoder: np.ndarray  # (N, D_h)
    local: Optional[np.ndarray]  # (N, D_e)
    global_: Optional[np.ndarray]  # (D_e,)
    severity_index: int
    correct: np.ndarray  # (N,) float64
    valid: np.ndarray  # (N,) float64
    degenerate_words: int = 0

    @property
    def n_words(self) -> int:
        return int(self.decoder.shape[0])


def build_features(bundle: FeatureBundle, config: FusionConfig) -> UtteranceFeatures:
    """Pool one bundle into per-word features for the configured mode.

    Words with an empty token span (or, defensively, no character rows when
    the local branch is active) are masked out.
    """
    if config.uses_local and bundle.cross_attention is None:
        raise MissingAttention(
            f"{bundle.utterance_id}: mode {config.mode!r} needs cross_attention"
        )
    n = bundle.n_words
    correct = np.array(bundle.labels.correct, dtype=np.float64)
    valid = np.array(bundle.labels.valid, dtype=np.float64)

    dec_rows = []
    for i, span in enumerate(bundle.token_spans):
        vec, has_tokens = pooling.decoder_word_state(bundle.decoder_states, span)
        if not has_tokens:
            valid[i] = 0.0
            correct[i] = 0.0
        dec_rows.append(vec)
    decoder = np.stack(dec_rows).astype(np.float32) if n else np.zeros((0, bundle.decoder_states.shape[1]), np.float32)

    local = None
    degenerate = 0
    if config.uses_local:
        selection = pooling.select_top_heads(bundle.cross_attention, config.attention_top_k)
        loc_rows = []
        for i in range(n):
            if len(bundle.char_rows[i]) == 0:
                valid[i] = 0.0
                correct[i] = 0.0
                loc_rows.append(np.zeros(bundle.encoder_states.shape[1], dtype=np.float64))
                continue
            profile = pooling.word_attention_profile(
                bundle.cross_attention,
                selection,
                bundle.char_rows[i],
                bundle.encoder_mask,
                word_index=i,
            )
            degenerate += int(profile.degenerate)
            loc_rows.append(pooling.local_pool(profile, bundle.encoder_states))
        local = np.stack(loc_rows).astype(np.float32) if n else np.zeros((0, bundle.encoder_states.shape[1]), np.float32)

    global_ = None
    if config.uses_global:
        global_ = pooling.global_pool(bundle.encoder_states, bundle.encoder_mask).astype(np.float32)

    return UtteranceFeatures(
        utterance_id=bundle.utterance_id,
        decoder=decoder,
        local=local,
        global_=global_,
        severity_index=bundle.severity_index,
        correct=correct,
        valid=valid,
        degenerate_words=degenerate,
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

Params = dict[str, np.ndarray]

# Weight-decayed parameters: weight matrices only. Biases, LayerNorm
# parameters, and embedding rows are never decayed.
_DECAYED = ("dec_proj_w", "loc_proj_w", "glob_proj_w", "hidden_w", "out_w")


def param_names(config: FusionConfig) -> list[str]:
    names = ["dec_proj_w", "dec_proj_b"]
    if config.uses_local:
        names += ["loc_proj_w", "loc_proj_b"]
    if config.uses_global:
        names += ["glob_proj_w", "glob_proj_b"]
    names += ["severity_emb", "ln_gain", "ln_bias", "hidden_w", "hidden_b", "out_w", "out_b"]
    return names


def init_params(config: FusionConfig, enc_dim: int, dec_dim: int, seed: int) -> Params:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, N(0, 0.02) embedding."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))

    def linear(out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32)
        return w, np.zeros(out_dim, dtype=np.float32)

    params: Params = {}
    params["dec_proj_w"], params["dec_proj_b"] = linear(config.proj_dim, dec_dim)
    if config.uses_local:
        params["loc_proj_w"], params["loc_proj_b"] = linear(config.proj_dim, enc_dim)
    if config.uses_global:
        params["glob_proj_w"], params["glob_proj_b"] = linear(config.proj_dim, enc_dim)
    params["severity_emb"] = (rng.standard_normal((N_SEVERITIES, config.severity_dim)) * 0.02).astype(np.float32)
    z = config.fused_dim
    params["ln_gain"] = np.ones(z, dtype=np.float32)
    params["ln_bias"] = np.zeros(z, dtype=np.float32)
    params["hidden_w"], params["hidden_b"] = linear(config.hidden_dim, z)
    params["out_w"], params["out_b"] = linear(1, config.hidden_dim)
    return params


def copy_params(params: Params) -> Params:
    return {name: arr.copy() for name, arr in params.items()}


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact erf-form GELU."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def forward(
    feats: UtteranceFeatures,
    params: Params,
    config: FusionConfig,
    train: bool = False,
    dropout_seed=0,
) -> tuple[np.ndarray, dict]:
    """Per-word logits for one utterance plus cached activations.

    Evaluation mode is deterministic; training mode applies an
    inverted-scaling dropout mask drawn from ``dropout_seed``.
    Computation follows the dtype of the parameters.
    """
    dtype = params["out_w"].dtype
    dec_in = np.asarray(feats.decoder, dtype=dtype)
    blocks = [dec_in @ params["dec_proj_w"].T + params["dec_proj_b"]]
    loc_in = glob_in = proj_glob = None
    if config.uses_local:
        if feats.local is None:
            raise MissingAttention(f"{feats.utterance_id}: features lack the local branch")
        loc_in = np.asarray(feats.local, dtype=dtype)
        blocks.append(loc_in @ params["loc_proj_w"].T + params["loc_proj_b"])
    if config.uses_global:
        if feats.global_ is None:
            raise MissingAttention(f"{feats.utterance_id}: features lack the global branch")
        glob_in = np.asarray(feats.global_, dtype=dtype)
        proj_glob = params["glob_proj_w"] @ glob_in + params["glob_proj_b"]
        blocks.append(np.broadcast_to(proj_glob, (feats.n_words, proj_glob.shape[0])))
    sev_row = params["severity_emb"][feats.severity_index]
    blocks.append(np.broadcast_to(sev_row, (feats.n_words, sev_row.shape[0])))
    z = np.concatenate(blocks, axis=1)

    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = np.square(centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dtype.type(config.layernorm_epsilon))
    xhat = centered * inv_std
    ln_out = xhat * params["ln_gain"] + params["ln_bias"]

    h_pre = ln_out @ params["hidden_w"].T + params["hidden_b"]
    act = gelu(h_pre)
    keep = None
    dropped = act
    if train and config.dropout_rate > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence(dropout_seed))
        keep = rng.random(act.shape) >= config.dropout_rate
        dropped = act * keep * dtype.type(1.0 / (1.0 - config.dropout_rate))
    logits = (dropped @ params["out_w"].T + params["out_b"])[:, 0]
    if not np.isfinite(logits).all():
        raise NonFiniteActivation(f"{feats.utterance_id}: non-finite logits")
    cache = {
        "dec_in": dec_in,
        "loc_in": loc_in,
        "glob_in": glob_in,
        "proj_glob": proj_glob,
        "severity_index": feats.severity_index,
        "xhat": xhat,
        "inv_std": inv_std,
        "ln_out": ln_out,
        "h_pre": h_pre,
        "keep": keep,
        "dropped": dropped,
        "n_words": feats.n_words,
    }
    return logits, cache


def probabilities(logits: np.ndarray) -> np.ndarray:
    """Sigmoid of logits, in float64 for downstream aggregation."""
    return expit(np.asarray(logits, dtype=np.float64))


def eval_probabilities(feats: UtteranceFeatures, params: Params, config: FusionConfig) -> np.ndarray:
    logits, _ = forward(feats, params, config, train=False)
    return probabilities(logits)


def masked_bce(p: np.ndarray, correct: np.ndarray, valid: np.ndarray) -> float:
    """Masked binary cross-entropy from probabilities (p strictly in (0, 1))."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(correct, dtype=np.float64)
    m = np.asarray(valid, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise NoValidWords("masked BCE over zero valid words")
    per = c * np.log(p) + (1.0 - c) * np.log(1.0 - p)
    return float(-(m * per).sum() / total)


def masked_bce_from_logits(logits: np.ndarray, correct: np.ndarray, valid: np.ndarray) -> float:
    """Numerically stable masked BCE computed from logits."""
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(correct, dtype=np.float64)
    m = np.asarray(valid, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise NoValidWords("masked BCE over zero valid words")
    per = c * np.logaddexp(0.0, -x) + (1.0 - c) * np.logaddexp(0.0, x)
    return float((m * per).sum() / total)


def backward_utterance(cache: dict, dlogits: np.ndarray, params: Params, config: FusionConfig) -> Params:
    """Parameter gradients for one utterance given d(loss)/d(logits)."""
    dtype = params["out_w"].dtype
    dlogits = np.asarray(dlogits, dtype=dtype)
    grads: Params = {}

    dropped = cache["dropped"]
    grads["out_w"] = (dlogits[None, :] @ dropped).astype(dtype)
    grads["out_b"] = np.array([dlogits.sum()], dtype=dtype)
    d_dropped = np.outer(dlogits, params["out_w"][0])
    if cache["keep"] is not None:
        d_act = d_dropped * cache["keep"] * dtype.type(1.0 / (1.0 - config.dropout_rate))
    else:
        d_act = d_dropped
    d_hpre = d_act * gelu_grad(cache["h_pre"])
    grads["hidden_w"] = d_hpre.T @ cache["ln_out"]
    grads["hidden_b"] = d_hpre.sum(axis=0)
    d_ln = d_hpre @ params["hidden_w"]

    xhat = cache["xhat"]
    grads["ln_gain"] = (d_ln * xhat).sum(axis=0)
    grads["ln_bias"] = d_ln.sum(axis=0)
    dxhat = d_ln * params["ln_gain"]
    z_dim = xhat.shape[1]
    dz = (
        cache["inv_std"]
        / z_dim
        * (
            z_dim * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
    )

    offset = 0
    dz_dec = dz[:, offset : offset + config.proj_dim]
    offset += config.proj_dim
    grads["dec_proj_w"] = dz_dec.T @ cache["dec_in"]
    grads["dec_proj_b"] = dz_dec.sum(axis=0)
    if config.uses_local:
        dz_loc = dz[:, offset : offset + config.proj_dim]
        offset += config.proj_dim
        grads["loc_proj_w"] = dz_loc.T @ cache["loc_in"]
        grads["loc_proj_b"] = dz_loc.sum(axis=0)
    if config.uses_global:
        dz_glob = dz[:, offset : offset + config.proj_dim]
        offset += config.proj_dim
        d_proj_glob = dz_glob.sum(axis=0)
        grads["glob_proj_w"] = np.outer(d_proj_glob, cache["glob_in"])
        grads["glob_proj_b"] = d_proj_glob
    dz_sev = dz[:, offset:]
    d_emb = np.zeros_like(params["severity_emb"])
    d_emb[cache["severity_index"]] = dz_sev.sum(axis=0)
    grads["severity_emb"] = d_emb
    return {name: grads[name].astype(dtype) for name in params}


def batch_loss_and_grads(
    batch: Sequence[UtteranceFeatures],
    params: Params,
    config: FusionConfig,
    dropout_seed: int = 0,
    train: bool = True,
) -> tuple[float, Params]:
    """Masked BCE over the batch's valid words plus summed parameter gradients.

    The loss divides once by the total number of valid words in the batch;
    gradients are reduced in the given utterance order.
    """
    total_valid = float(sum(f.valid.sum() for f in batch))
    if total_valid <= 0:
        raise NoValidWords("batch has no valid words")
    dtype = params["out_w"].dtype
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    loss_sum = 0.0
    for idx, feats in enumerate(batch):
        logits, cache = forward(
            feats, params, config, train=train, dropout_seed=[int(dropout_seed), idx]
        )
        x = logits.astype(np.float64)
        p = expit(x)
        c, m = feats.correct, feats.valid
        loss_sum += float(
            (m * (c * np.logaddexp(0.0, -x) + (1.0 - c) * np.logaddexp(0.0, x))).sum()
        )
        dlogits = (m * (p - c) / total_valid).astype(dtype)
        for name, g in backward_utterance(cache, dlogits, params, config).items():
            grads[name] += g
    return loss_sum / total_valid, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_max_norm: Optional[float] = 1.0


def init_optimizer(
    params: Params,
    lr: float = 1e-3,
    weight_decay: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    clip_max_norm: Optional[float] = 1.0,
) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
        lr=lr,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        clip_max_norm=clip_max_norm,
    )


def global_grad_norm(grads: Params) -> float:
    total = 0.0
    for arr in grads.values():
        total += float((arr.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients_(grads: Params, max_norm: float) -> float:
    """Scale gradients in place to the max global norm; returns the scale."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for arr in grads.values():
        arr *= arr.dtype.type(scale)
    return scale


def adamw_step(params: Params, grads: Params, state: OptimizerState, lr: Optional[float] = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Clips the global gradient norm first, then per parameter:
    p <- p * (1 - lr * wd)   (weight matrices only)
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if lr is None:
        lr = state.lr
    if state.clip_max_norm is not None:
        clip_gradients_(grads, state.clip_max_norm)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= p.dtype.type(state.beta1)
        m += p.dtype.type(1.0 - state.beta1) * g
        v *= p.dtype.type(state.beta2)
        v += p.dtype.type(1.0 - state.beta2) * (g * g)
        m_hat = m / p.dtype.type(bc1)
        v_hat = v / p.dtype.type(bc2)
        if name in _DECAYED and state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        p -= p.dtype.type(lr) * m_hat / (np.sqrt(v_hat) + p.dtype.type(state.epsilon))
    state.step = t


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to base_lr over the first fraction of steps, then linear
    decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if step >= total_steps:
        return 0.0
    return base_lr * (total_steps - step) / (total_steps - warmup)
