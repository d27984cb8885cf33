"""Contrastive fine-tuning of the dual encoder.

The objective is the symmetric multi-positive contrastive loss: for each
image, the mean negative log-softmax (over all batch texts) of its
positive texts, plus the same with images and texts swapped.  Positives
are class-level, so every same-class caption in the batch counts.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetView, epoch_batches
from .embed import (
    GROUPS,
    PARAM_GROUP,
    TAU_MAX,
    TAU_MIN,
    EncoderDims,
    EncoderPair,
    build_vocabulary,
    image_backward,
    image_forward,
    init_params,
    pooling_matrix,
    save_checkpoint,
    text_backward,
    text_forward,
)
from .errors import ConfigError, DataError, NumericError, StateError
from .morphology import StageClass
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

LOG_TAU_MIN, LOG_TAU_MAX = math.log(TAU_MIN), math.log(TAU_MAX)


@dataclass(frozen=True)
class LossBreakdown:
    image: float
    text: float

    @property
    def total(self) -> float:
        return self.image + self.text


def positive_mask(image_labels: Sequence, text_labels: Sequence) -> np.ndarray:
    """``mask[q, r]`` is true when text ``r`` is a positive for image ``q``."""
    return np.asarray(image_labels)[:, None] == np.asarray(text_labels)[None, :]


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check(sim: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sim = np.asarray(sim, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or mask.shape != sim.shape:
        raise DataError(f"need a square similarity matrix and matching mask, got {sim.shape} and {mask.shape}")
    if not np.isfinite(sim).all():
        raise NumericError("similarity matrix has non-finite entries")
    if not mask.any(axis=1).all() or not mask.any(axis=0).all():
        raise DataError("every image and every text needs at least one positive")
    return sim, mask


def contrastive_loss_and_grad(sim: np.ndarray, mask: np.ndarray, tau: float):
    """Loss breakdown and its gradient with respect to the logits ``sim / tau``."""
    sim, mask = _check(sim, mask)
    n = sim.shape[0]
    logits = sim / tau
    pos_q = mask.sum(axis=1)
    pos_r = mask.sum(axis=0)
    lsm_row = _log_softmax(logits, axis=1)
    lsm_col = _log_softmax(logits, axis=0)
    l_image = -np.sum(np.where(mask, lsm_row, 0.0).sum(axis=1) / pos_q) / n
    l_text = -np.sum(np.where(mask, lsm_col, 0.0).sum(axis=0) / pos_r) / n
    d_logits = (np.exp(lsm_row) - mask / pos_q[:, None]) / n
    d_logits += (np.exp(lsm_col) - mask / pos_r[None, :]) / n
    return LossBreakdown(float(l_image), float(l_text)), d_logits


def contrastive_loss(sim: np.ndarray, mask: np.ndarray, tau: float) -> LossBreakdown:
    return contrastive_loss_and_grad(sim, mask, tau)[0]


def loss_and_gradients(
    pair: EncoderPair,
    images,
    captions: Sequence[str],
    labels: Sequence,
    text_labels: Sequence | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Forward and exact reverse pass; frozen tensors get all-zero gradients."""
    p = pair.params
    img, img_cache = image_forward(p, images, pair.dims.patch)
    txt, txt_cache = text_forward(p, pooling_matrix(pair, captions))
    sim = img @ txt.T
    raw_tau = float(np.exp(p["log_tau"]))
    tau = min(max(raw_tau, TAU_MIN), TAU_MAX)
    mask = positive_mask(labels, labels if text_labels is None else text_labels)
    loss, d_logits = contrastive_loss_and_grad(sim, mask, tau)

    d_sim = d_logits / tau
    grads = image_backward(p, img_cache, d_sim @ txt)
    grads.update(text_backward(p, txt_cache, d_sim.T @ img))
    # logits = sim * exp(-log_tau); no gradient while tau sits on a clamp
    d_log_tau = -np.sum(d_logits * sim) / tau if TAU_MIN < raw_tau < TAU_MAX else 0.0
    grads["log_tau"] = np.array(d_log_tau)

    for name in grads:
        if not pair.trainable(name):
            grads[name] = np.zeros_like(p[name])
        elif not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def loss_gradients(batch, pair: EncoderPair) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Gradients for a batch of ``(pixels, caption, stage)`` triples."""
    images = np.stack([b[0] for b in batch])
    captions = [b[1] for b in batch]
    labels = [int(b[2]) for b in batch]
    return loss_and_gradients(pair, images, captions, labels)


# --- optimizer --------------------------------------------------------------


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adamw_step(pair: EncoderPair, grads: dict[str, np.ndarray], state: AdamWState, config: AdamWConfig):
    """Decoupled weight decay Adam update applied in place to unfrozen tensors.

    Moments are kept per tensor, so a group unfrozen late starts with fresh
    bias correction.  ``log_tau`` is not decayed and is clamped after the step.
    """
    for name, g in grads.items():
        if not pair.trainable(name):
            continue
        param = pair.params[name]
        if g.shape != param.shape:
            raise StateError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
            state.steps[name] = 0
        v = state.v[name]
        if m.shape != param.shape or v.shape != param.shape:
            raise StateError(f"optimizer state for {name} does not match the parameter shape")
        state.steps[name] += 1
        t = state.steps[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        if config.weight_decay and name != "log_tau":
            param *= 1.0 - config.lr * config.weight_decay
        param -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if name == "log_tau":
            pair.params[name] = np.clip(param, LOG_TAU_MIN, LOG_TAU_MAX)
    return pair, state


# --- schedule and loop --------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    unfreeze_interval: int = 5
    unfreeze_order: tuple[str, ...] = ("g3", "g2", "g1")
    seed: int = 0
    dims: EncoderDims = field(default_factory=EncoderDims)
    prototype_mode: str = "mean"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be positive and batch_size at least 2")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.unfreeze_interval < 1:
            raise ConfigError("unfreeze_interval must be positive")
        bad = set(self.unfreeze_order) - set(GROUPS)
        if bad:
            raise ConfigError(f"unknown layer groups in unfreeze_order: {sorted(bad)}")

    @property
    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unfreeze_order"] = list(self.unfreeze_order)
        return d


ALWAYS_TRAINABLE = ("heads", "log_tau")


def unfreeze_schedule(epoch: int, config: TrainConfig = TrainConfig()) -> set[str]:
    """Trainable groups at ``epoch``: heads and tau, plus one more group every interval."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    unlocked = epoch // config.unfreeze_interval
    return set(ALWAYS_TRAINABLE) | set(config.unfreeze_order[:unlocked])


class DivergenceError(NumericError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    pair: EncoderPair
    metrics: list[dict]
    checkpoint: Path | None


EpochHook = Callable[[int, EncoderPair, EncoderPair, set], None]


def train(
    view: DatasetView,
    config: TrainConfig,
    out_dir=None,
    hook: EpochHook | None = None,
) -> TrainResult:
    """Run the epoch loop; writes ``checkpoint.npz`` and ``metrics.jsonl`` into ``out_dir``.

    ``hook(epoch, before, after, trainable_groups)`` is called after every
    epoch with a parameter snapshot from the start of the epoch.
    """
    from .zeroshot import build_prototypes, evaluate

    config.validate()
    train_split = view.split("train")
    if not train_split or not view.split("val"):
        raise ConfigError("training needs non-empty train and val splits")
    batch_size = min(config.batch_size, len(train_split))

    vocab = build_vocabulary(c for s in StageClass for c in view.caption_texts(s))
    pair = init_params(config.seed, config.dims, vocab)
    state = AdamWState()
    opt = config.adamw
    rng = make_rng(derive_seed(config.seed, 0x7A1))

    out = Path(out_dir) if out_dir is not None else None
    ckpt = metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.npz"
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    extra = {"manifest_sha256": view.manifest.checksum, "train_config": config.to_dict()}

    metrics: list[dict] = []
    last_good: Path | None = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        groups = unfreeze_schedule(epoch, config)
        pair.set_trainable(groups)
        before = pair.copy() if hook else None
        sums = np.zeros(2)
        batches = 0
        for batch in epoch_batches(view, "train", batch_size, rng):
            try:
                loss, grads = loss_gradients(batch, pair)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", last_good) from exc
            if not math.isfinite(loss.total):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}", last_good)
            adamw_step(pair, grads, state, opt)
            sums += (loss.image, loss.text)
            batches += 1
        protos = build_prototypes(pair, view.captions, config.prototype_mode)
        report = evaluate(view, "val", pair, protos)
        l_img, l_txt = sums / max(batches, 1)
        row = {
            "epoch": epoch,
            "L_image": float(l_img),
            "L_text": float(l_txt),
            "L_total": float(l_img + l_txt),
            "tau": pair.tau,
            "trainable_param_count": pair.trainable_count(),
            "val_recall_at_1": report.recall_at_1,
        }
        metrics.append(row)
        log.info("epoch %d  loss %.4f  tau %.4f  val R@1 %.4f  (%.2fs)",
                 epoch, row["L_total"], row["tau"], row["val_recall_at_1"], time.perf_counter() - t0)
        if out is not None:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            save_checkpoint(pair, ckpt, {**extra, "epoch": epoch})
            last_good = ckpt
        if hook:
            hook(epoch, before, pair, groups)
    return TrainResult(pair, metrics, ckpt)
