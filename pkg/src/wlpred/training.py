"""Dataset splitting, the training loop, checkpoint selection, prediction.

Training is bit-reproducible for a given seed: parameter init, batch
shuffling, and dropout masks all derive from the seed, and gradient
reduction follows a fixed utterance order. Folds and seeds are independent
jobs, so any worker count yields identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import fusion
from .bundles import FeatureBundle, read_container, write_container
from .metrics import incorrect_word_f1


class TooFewScenes(ValueError):
    pass


class EmptyValidationSet(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    """Scene-grouped fold assignment: every scene lands in exactly one fold."""

    k: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, scene_id: str) -> int:
        return self.assignment[scene_id]


def make_grouped_folds(scene_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle distinct scenes deterministically and deal them round-robin."""
    scenes = sorted(set(scene_ids))
    if len(scenes) < k:
        raise TooFewScenes(f"need at least {k} distinct scenes, have {len(scenes)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    order = rng.permutation(len(scenes))
    assignment = {scenes[int(idx)]: pos % k for pos, idx in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment, seed=seed)


@dataclass
class TrainConfig:
    fusion: fusion.FusionConfig = field(default_factory=fusion.FusionConfig)
    epochs: int = 5
    batch_size: int = 64  # utterances per batch
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clip_max_norm: float = 1.0
    warmup_fraction: float = 0.1
    folds: int = 5
    seeds: int = 5
    seed_base: int = 0

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "fusion"}
        out.update(self.fusion.to_dict())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        fusion_kwargs = {k: data.pop(k) for k in list(data) if k in _FUSION_KEYS}
        return cls(fusion=fusion.FusionConfig(**fusion_kwargs), **data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a ``key = value`` config file; '#' starts a comment."""
        data: dict = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in _CONFIG_TYPES:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                data[key] = _CONFIG_TYPES[key](value)
        return cls.from_dict(data)


_FUSION_KEYS = frozenset(fusion.FusionConfig().to_dict())
_CONFIG_TYPES = {
    "mode": str,
    "proj_dim": int,
    "severity_dim": int,
    "hidden_dim": int,
    "dropout_rate": float,
    "layernorm_epsilon": float,
    "attention_top_k": int,
    "epochs": int,
    "batch_size": int,
    "base_lr": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "adam_epsilon": float,
    "clip_max_norm": float,
    "warmup_fraction": float,
    "folds": int,
    "seeds": int,
    "seed_base": int,
}


@dataclass
class Checkpoint:
    params: fusion.Params
    fusion_config: fusion.FusionConfig
    train_config: dict
    seed: int
    fold: int
    epoch: int
    step: int
    val_f1: float
    enc_dim: int
    dec_dim: int


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = [(f"param/{name}", ckpt.params[name]) for name in sorted(ckpt.params)]
    metadata = {
        "kind": "checkpoint",
        "fusion_config": ckpt.fusion_config.to_dict(),
        "train_config": ckpt.train_config,
        "seed": ckpt.seed,
        "fold": ckpt.fold,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "val_f1": ckpt.val_f1,
        "enc_dim": ckpt.enc_dim,
        "dec_dim": ckpt.dec_dim,
    }
    write_container(path, tensors, metadata)


def load_checkpoint(path) -> Checkpoint:
    tensors, metadata = read_container(path)
    if metadata.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    params = {
        name[len("param/") :]: arr for name, arr in tensors.items() if name.startswith("param/")
    }
    return Checkpoint(
        params=params,
        fusion_config=fusion.FusionConfig.from_dict(metadata["fusion_config"]),
        train_config=metadata["train_config"],
        seed=int(metadata["seed"]),
        fold=int(metadata["fold"]),
        epoch=int(metadata["epoch"]),
        step=int(metadata["step"]),
        val_f1=float(metadata["val_f1"]),
        enc_dim=int(metadata["enc_dim"]),
        dec_dim=int(metadata["dec_dim"]),
    )


def _val_f1(feats, params, config) -> float:
    probs = [fusion.eval_probabilities(f, params, config) for f in feats]
    return incorrect_word_f1(probs, [f.correct for f in feats], [f.valid for f in feats])


def train_fold(
    train_bundles: Sequence[FeatureBundle],
    val_bundles: Sequence[FeatureBundle],
    config: TrainConfig,
    seed: int,
    fold_id: int = 0,
) -> Checkpoint:
    """Train for ``config.epochs`` epochs; return the checkpoint with the best
    validation incorrect-word F1 (ties go to the earlier epoch)."""
    if not val_bundles:
        raise EmptyValidationSet("validation set is empty")
    if not train_bundles:
        raise ValueError("training set is empty")
    train_scenes = {b.scene_id for b in train_bundles}
    val_scenes = {b.scene_id for b in val_bundles}
    if train_scenes & val_scenes:
        raise ValueError(f"train and val share scenes: {sorted(train_scenes & val_scenes)}")

    fcfg = config.fusion
    train_feats = [fusion.build_features(b, fcfg) for b in train_bundles]
    val_feats = [fusion.build_features(b, fcfg) for b in val_bundles]
    enc_dim = int(train_bundles[0].encoder_states.shape[1])
    dec_dim = int(train_bundles[0].decoder_states.shape[1])

    params = fusion.init_params(fcfg, enc_dim, dec_dim, seed=seed)
    opt = fusion.init_optimizer(
        params,
        lr=config.base_lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.adam_epsilon,
        clip_max_norm=config.clip_max_norm,
    )
    n = len(train_feats)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0D0E]))

    best: Optional[Checkpoint] = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [train_feats[int(i)] for i in order[start : start + config.batch_size]]
            lr = fusion.lr_at(step, total_steps, config.base_lr, config.warmup_fraction)
            _, grads = fusion.batch_loss_and_grads(
                batch, params, fcfg, dropout_seed=step, train=True
            )
            fusion.adamw_step(params, grads, opt, lr=lr)
            step += 1
        f1 = _val_f1(val_feats, params, fcfg)
        if best is None or f1 > best.val_f1:
            best = Checkpoint(
                params=fusion.copy_params(params),
                fusion_config=fcfg,
                train_config=config.to_dict(),
                seed=seed,
                fold=fold_id,
                epoch=epoch,
                step=step,
                val_f1=f1,
                enc_dim=enc_dim,
                dec_dim=dec_dim,
            )
    assert best is not None
    return best


def _split_by_fold(bundles: Sequence[FeatureBundle], plan: FoldPlan, fold: int):
    train = [b for b in bundles if plan.fold_of(b.scene_id) != fold]
    val = [b for b in bundles if plan.fold_of(b.scene_id) == fold]
    return train, val


def _train_job(args) -> Checkpoint:
    bundles, config, plan, seed, fold = args
    train, val = _split_by_fold(bundles, plan, fold)
    return train_fold(train, val, config, seed=seed, fold_id=fold)


def train_cross_validation(
    bundles: Sequence[FeatureBundle],
    config: TrainConfig,
    workers: int = 1,
) -> tuple[FoldPlan, list[Checkpoint]]:
    """Train every (seed, fold) job under one fixed fold plan."""
    bundles = sorted(bundles, key=lambda b: b.utterance_id)
    plan = make_grouped_folds([b.scene_id for b in bundles], config.folds, seed=config.seed_base)
    seeds = [config.seed_base + i for i in range(config.seeds)]
    jobs = [(bundles, config, plan, seed, fold) for seed in seeds for fold in range(config.folds)]
    if workers <= 1:
        checkpoints = [_train_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            checkpoints = list(pool.map(_train_job, jobs))
    return plan, checkpoints


@dataclass(frozen=True)
class PredictionRecord:
    utterance_id: str
    probabilities: list[float]
    y_hat: Optional[float]
    seed: int
    folds: list[int]


def sentence_score(p: np.ndarray, valid: np.ndarray) -> Optional[float]:
    """100 times the masked mean of word probabilities; None if all masked."""
    m = np.asarray(valid, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        return None
    return float(100.0 * (m * np.asarray(p, dtype=np.float64)).sum() / total)


def _check_same_config(checkpoints: Sequence[Checkpoint]) -> fusion.FusionConfig:
    if not checkpoints:
        raise ValueError("no checkpoints")
    first = checkpoints[0].fusion_config
    for ckpt in checkpoints[1:]:
        if ckpt.fusion_config.to_dict() != first.to_dict():
            raise ConfigMismatch("checkpoints disagree on the fusion configuration")
    return first


def _predict_job(args) -> list[PredictionRecord]:
    bundle, checkpoints = args
    config = checkpoints[0].fusion_config
    feats = fusion.build_features(bundle, config)
    by_seed: dict[int, list[Checkpoint]] = {}
    for ckpt in checkpoints:
        by_seed.setdefault(ckpt.seed, []).append(ckpt)
    records = []
    for seed in sorted(by_seed):
        folds = sorted(by_seed[seed], key=lambda c: c.fold)
        acc = np.zeros(feats.n_words, dtype=np.float64)
        for ckpt in folds:
            acc += fusion.eval_probabilities(feats, ckpt.params, config)
        p = acc / len(folds)
        records.append(
            PredictionRecord(
                utterance_id=bundle.utterance_id,
                probabilities=[float(x) for x in p],
                y_hat=sentence_score(p, feats.valid),
                seed=seed,
                folds=[c.fold for c in folds],
            )
        )
    return records


def predict(
    bundles: Sequence[FeatureBundle],
    checkpoints: Sequence[Checkpoint],
    workers: int = 1,
) -> list[PredictionRecord]:
    """Fold-averaged per-seed probabilities and sentence scores.

    For each utterance and seed, word probabilities are the mean over that
    seed's fold checkpoints in evaluation mode; the sentence score is 100
    times the masked mean of the averaged probabilities.
    """
    _check_same_config(checkpoints)
    bundles = sorted(bundles, key=lambda b: b.utterance_id)
    jobs = [(bundle, list(checkpoints)) for bundle in bundles]
    if workers <= 1:
        per_bundle = [_predict_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_bundle = list(pool.map(_predict_job, jobs))
    return [record for records in per_bundle for record in records]
