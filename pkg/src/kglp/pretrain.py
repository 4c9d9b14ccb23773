"""Multi-task pre-training loop.

The per-step loss is the sum of two cross-entropies over one shared prediction
head: the token-level term averages over positions with a ``y2`` target and the
item-level term over positions with a ``y1`` target (the item term realizes
whichever of the three masking tasks produced each sample). Positions without a
target contribute nothing. Optimization is AdamW with two learning-rate groups,
linear warmup over the first fraction of steps then linear decay, global-norm
gradient clipping, and early stopping on total validation loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import KnowledgeGraph
from .encoder import Encoder
from .layers import clip_global_norm, cross_entropy, per_row_nll
from .optim import AdamW, warmup_linear_decay
from .sampling import PretrainSample, build_pretrain_sample, derive_rng
from .text import PAD_ID, TokenizedCatalog, Vocabulary

logger = logging.getLogger(__name__)

# rng stream tags so shuffling, masking, dropout, and validation never collide
_SHUFFLE, _SAMPLE, _DROPOUT, _VALID = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the step diagnostics."""

    def __init__(self, step: int, lrs: dict, batch_ids: list[int]):
        self.step = step
        self.lrs = lrs
        self.batch_ids = batch_ids
        super().__init__(
            f"non-finite loss at step {step} (lrs={lrs}, batch sample ids={batch_ids})")


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_linear: float = 1e-4
    lr_attention: float = 5e-5
    warmup_frac: float = 0.05
    patience: int = 3
    max_len: int = 128
    seed: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    mlm_only: bool = False
    log_every: int = 50


@dataclass
class PretrainLossReport:
    """Per-batch loss decomposition; ``total`` is exactly mlm + mim.

    ``task_losses`` splits the item term by the masking task that produced each
    sample (the mim loss is their position-count weighted mean).
    """

    mlm_loss: float
    mim_loss: float
    task_counts: dict[str, int] = field(default_factory=dict)
    task_losses: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.mlm_loss + self.mim_loss


def _stack_and_trim(samples: list[PretrainSample]):
    """Batch arrays trimmed to the longest real sequence (multiple of 8).

    Safe by the encoder's padding invariance; targets only exist inside the
    non-PAD content so nothing is cut.
    """
    max_len = samples[0].x.shape[0]
    longest = max(s.layout.length for s in samples)
    trim = min(max_len, -(-longest // 8) * 8)
    x = np.stack([s.x[:trim] for s in samples])
    mask = np.stack([s.mask[:trim] for s in samples])
    y1 = np.stack([s.y1[:trim] for s in samples])
    y2 = np.stack([s.y2[:trim] for s in samples])
    return x, mask, y1, y2


def _batch_losses(encoder: Encoder, samples: list[PretrainSample], train: bool,
                  rng=None, need_grads: bool = False):
    """Forward pass and the two loss terms; gradient context only when asked."""
    x, mask, y1, y2 = _stack_and_trim(samples)
    out, cache = encoder.forward(x, mask, train=train, rng=rng)
    pos1 = y1 != PAD_ID
    pos2 = y2 != PAD_ID
    pos_any = pos1 | pos2
    if not pos_any.any():
        zero = np.zeros_like(out.token_states)
        return 0.0, 0.0, (cache, zero, {}, {})
    states = out.token_states[pos_any]
    logits, head_cache = encoder.predict_tokens(states, train=train)
    sel1 = pos1[pos_any]
    sel2 = pos2[pos_any]
    mim_loss, dlog1 = cross_entropy(logits[sel1], y1[pos1])
    mlm_loss, dlog2 = cross_entropy(logits[sel2], y2[pos2])
    if not need_grads:
        return mlm_loss, mim_loss, None

    # split the item term by the task that produced each sample
    task_losses: dict[str, float] = {}
    if sel1.any():
        nll = per_row_nll(logits[sel1], y1[pos1])
        position_task = np.array([samples[row].task
                                  for row in np.nonzero(pos1)[0]])
        for task in dict.fromkeys(position_task.tolist()):
            task_losses[task] = float(nll[position_task == task].mean())

    dlogits = np.zeros_like(logits)
    dlogits[sel1] = dlog1
    dlogits[sel2] = dlog2
    head_grads, dstates = encoder.head_backward(head_cache, dlogits)
    d_token_states = np.zeros_like(out.token_states)
    d_token_states[pos_any] = dstates
    return mlm_loss, mim_loss, (cache, d_token_states, head_grads, task_losses)


def pretrain_step(samples: list[PretrainSample], encoder: Encoder,
                  optimizer: AdamW, lr_scale: float,
                  rng: np.random.Generator | None = None,
                  clip_norm: float = 1.0) -> PretrainLossReport:
    """One optimizer update over a batch of pre-training samples.

    Raises TrainingDiverged (before any parameter update) if a loss term is
    non-finite; the caller decorates the exception with step context.
    """
    if not samples:
        raise ValueError("empty batch")
    mlm_loss, mim_loss, ctx = _batch_losses(encoder, samples, train=True, rng=rng,
                                            need_grads=True)
    if not (math.isfinite(mlm_loss) and math.isfinite(mim_loss)):
        raise TrainingDiverged(-1, {}, [])
    cache, d_token_states, head_grads, task_losses = ctx
    grads = encoder.backward(cache, d_states=d_token_states)
    for name, g in head_grads.items():
        grads[name] += g
    if clip_norm:
        clip_global_norm(grads, clip_norm)
    optimizer.step(encoder.params, grads, lr_scale)

    counts: dict[str, int] = {}
    for s in samples:
        counts[s.task] = counts.get(s.task, 0) + 1
    return PretrainLossReport(mlm_loss=mlm_loss, mim_loss=mim_loss,
                              task_counts=counts, task_losses=task_losses)


def validation_loss(encoder: Encoder, cat: TokenizedCatalog, triples,
                    config: PretrainConfig) -> tuple[float, float]:
    """(mlm, mim) means over the validation split with a fixed masking stream."""
    mlm_sum = mim_sum = 0.0
    n_batches = 0
    for start in range(0, len(triples), config.batch_size):
        chunk = triples[start:start + config.batch_size]
        samples = [
            build_pretrain_sample(t, cat, config.max_len,
                                  derive_rng(config.seed, _VALID, start + j),
                                  mlm_only=config.mlm_only)
            for j, t in enumerate(chunk)
        ]
        mlm, mim, _ = _batch_losses(encoder, samples, train=False)
        mlm_sum += mlm
        mim_sum += mim
        n_batches += 1
    if n_batches == 0:
        return 0.0, 0.0
    return mlm_sum / n_batches, mim_sum / n_batches


def run_pretraining(kg: KnowledgeGraph, vocab: Vocabulary, encoder: Encoder,
                    config: PretrainConfig, log_path=None) -> list[dict]:
    """Train ``encoder`` in place on the augmented train split; early-stops on
    validation loss and restores the best parameters. Returns the epoch history."""
    cat = TokenizedCatalog(kg, vocab)
    train = kg.splits["train"]
    valid = kg.splits["valid"]
    if not train:
        raise ValueError("empty train split")
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    optimizer = AdamW({"linear": config.lr_linear, "attention": config.lr_attention},
                      weight_decay=config.weight_decay)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    history: list[dict] = []
    best_val = math.inf
    best_state = None
    bad_epochs = 0
    step = 0
    try:
        for epoch in range(config.epochs):
            order = derive_rng(config.seed, _SHUFFLE, epoch).permutation(len(train))
            dropout_rng = derive_rng(config.seed, _DROPOUT, epoch)
            epoch_mlm = epoch_mim = 0.0
            for start in range(0, len(train), config.batch_size):
                ids = [int(i) for i in order[start:start + config.batch_size]]
                samples = [
                    build_pretrain_sample(train[i], cat, config.max_len,
                                          derive_rng(config.seed, _SAMPLE, epoch, i),
                                          mlm_only=config.mlm_only)
                    for i in ids
                ]
                lr_scale = warmup_linear_decay(step, total_steps, config.warmup_frac)
                try:
                    report = pretrain_step(samples, encoder, optimizer, lr_scale,
                                           rng=dropout_rng, clip_norm=config.clip_norm)
                except TrainingDiverged:
                    raise TrainingDiverged(step, optimizer.learning_rates(lr_scale),
                                           ids) from None
                epoch_mlm += report.mlm_loss
                epoch_mim += report.mim_loss
                if log_fh and step % config.log_every == 0:
                    lrs = optimizer.learning_rates(lr_scale)
                    log_fh.write(json.dumps({
                        "step": step, "epoch": epoch,
                        "lr_linear": lrs["linear"], "lr_attention": lrs["attention"],
                        "mlm_loss": report.mlm_loss, "mim_loss": report.mim_loss,
                        "tasks": report.task_counts,
                        "task_losses": report.task_losses}) + "\n")
                step += 1

            val_mlm, val_mim = validation_loss(encoder, cat, valid, config)
            val_total = val_mlm + val_mim
            improved = val_total < best_val
            if improved:
                best_val = val_total
                best_state = encoder.copy_params()
                bad_epochs = 0
            else:
                bad_epochs += 1
            record = {
                "epoch": epoch,
                "train_mlm": epoch_mlm / steps_per_epoch,
                "train_mim": epoch_mim / steps_per_epoch,
                "val_mlm": val_mlm, "val_mim": val_mim, "val_total": val_total,
                "best": improved,
            }
            history.append(record)
            logger.info("pretrain epoch %d: train %.4f val %.4f%s", epoch,
                        record["train_mlm"] + record["train_mim"], val_total,
                        " *" if improved else "")
            if log_fh:
                log_fh.write(json.dumps({"epoch_summary": record}) + "\n")
                log_fh.flush()
            if bad_epochs >= config.patience:
                logger.info("early stop after %d epochs without improvement",
                            bad_epochs)
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        encoder.load_params(*best_state)
    return history
