"""Siamese fine-tuning with in-batch negative sampling.

Each batch of n triples is encoded twice — query side (head text ++ relation
text) and candidate side (tail entity text) — and every cross pair (i, j)
becomes a supervised cell: n positives on the diagonal plus any off-diagonal
pair the label dictionary knows to be true, all remaining cells negative. The
loss per cell combines a focal term on the cosine similarity (mapped to a
probability via p = (cos + 1) / 2, clamped away from {0, 1}) and a sigmoid term
on the summed elementwise absolute difference of the two vectors; the batch
loss is the mean over all cells. An ablation mode replaces in-batch negatives
with k uniformly sampled negative entities per row.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import FilterIndex, KnowledgeGraph, Triple, build_filter_index
from .encoder import Encoder
from .layers import clip_global_norm
from .optim import AdamW, warmup_linear_decay
from .pretrain import TrainingDiverged
from .sampling import derive_rng
from .evaluate import evaluate as evaluate_ranking
from .text import TokenizedCatalog, Vocabulary, assemble_entity, assemble_pair

logger = logging.getLogger(__name__)

_SHUFFLE, _DROPOUT, _NEGATIVES = 11, 12, 13

_P_EPS = 1e-6

#: count of zero-norm vectors silently scored as cosine 0 (diagnostic counter)
zero_norm_count = 0


@dataclass(frozen=True)
class FocalParams:
    """Class weight alpha in (0,1) and hard-example exponent gamma >= 0."""

    alpha: float = 0.8
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def build_label_matrix(batch: list[Triple], filter_index: FilterIndex) -> np.ndarray:
    """n x n binary labels: cell (i, j) is 1 iff tail_j completes query_i.

    The diagonal is always positive; off-diagonal positives appear when a batch
    tail is a known completion of another row's (head, relation) key.
    """
    n = len(batch)
    y = np.zeros((n, n), dtype=np.int8)
    for i, q in enumerate(batch):
        known = filter_index[(q.head, q.relation)]
        for j, c in enumerate(batch):
            if c.tail in known:
                y[i, j] = 1
        y[i, i] = 1
    return y


def _normalize_rows(vectors: np.ndarray):
    """Row-normalize; zero rows stay zero so their cosines come out as 0."""
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms == 0.0, 1.0, norms), norms


def _count_zero_norms(*norm_arrays) -> None:
    global zero_norm_count
    zeros = sum(int((n == 0.0).sum()) for n in norm_arrays)
    if zeros:
        zero_norm_count += zeros
        logger.warning("%d zero-norm vectors in cosine scoring", zeros)


def score_batch(pair_vectors: np.ndarray, entity_vectors: np.ndarray) -> np.ndarray:
    """Full cosine-similarity matrix between the two encoded sides."""
    u, pn = _normalize_rows(pair_vectors)
    v, en = _normalize_rows(entity_vectors)
    _count_zero_norms(pn, en)
    # rounding can push a perfect match to 1 + eps; the matrix contract is [-1, 1]
    return np.clip(u @ v.T, -1.0, 1.0)


def abs_diff_sums(pair_vectors: np.ndarray, entity_vectors: np.ndarray,
                  chunk: int = 64) -> np.ndarray:
    """Matrix of L1 distances: entry (i, j) = sum_k |pair_i[k] - entity_j[k]|."""
    n = pair_vectors.shape[0]
    out = np.empty((n, entity_vectors.shape[0]), dtype=pair_vectors.dtype)
    for s in range(0, n, chunk):
        block = pair_vectors[s:s + chunk, None, :] - entity_vectors[None, :, :]
        out[s:s + chunk] = np.abs(block).sum(axis=-1)
    return out


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        i, j = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"non-finite value in {name} at cell ({i}, {j})")


def joint_loss(scores: np.ndarray, diff_sums: np.ndarray, labels: np.ndarray,
               fp: FocalParams, cell_mask: np.ndarray | None = None) -> float:
    """Mean over cells of the focal cosine term plus the sigmoid distance term.

    ``cell_mask`` restricts the mean to a subset of cells (used by the
    random-negatives ablation); None means all cells participate.
    """
    loss, _, _ = joint_loss_with_grads(scores, diff_sums, labels, fp, cell_mask)
    return loss


def joint_loss_with_grads(scores, diff_sums, labels, fp: FocalParams,
                          cell_mask=None):
    """(loss, d_loss/d_scores, d_loss/d_diff_sums), gradients already meaned."""
    _check_finite("scores", scores)
    _check_finite("diff_sums", diff_sums)
    scores = scores.astype(np.float64)
    diff_sums = diff_sums.astype(np.float64)
    pos = labels.astype(bool)
    alpha, gamma = fp.alpha, fp.gamma

    raw_p = (scores + 1.0) / 2.0
    p = np.clip(raw_p, _P_EPS, 1.0 - _P_EPS)
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    one_minus = 1.0 - p
    l1 = np.where(pos,
                  -alpha * one_minus ** gamma * log_p,
                  -(1.0 - alpha) * p ** gamma * log_1p)
    sig = expit(diff_sums)
    l2 = np.where(pos, sig, 1.0 - sig)

    if cell_mask is None:
        n_cells = scores.size
        weight = np.full(scores.shape, 1.0 / n_cells)
    else:
        n_cells = int(cell_mask.sum())
        weight = np.where(cell_mask, 1.0 / n_cells, 0.0)
    loss = float(((l1 + l2) * weight).sum())

    dl1_dp = np.where(
        pos,
        alpha * gamma * one_minus ** (gamma - 1.0) * log_p
        - alpha * one_minus ** gamma / p,
        -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * log_1p
        + (1.0 - alpha) * p ** gamma / one_minus)
    unclipped = (raw_p > _P_EPS) & (raw_p < 1.0 - _P_EPS)
    dscores = dl1_dp * 0.5 * unclipped * weight
    ddiffs = np.where(pos, 1.0, -1.0) * sig * (1.0 - sig) * weight
    return loss, dscores, ddiffs


def vector_grads(pair_vectors, entity_vectors, dscores, ddiffs):
    """Backprop cell gradients through the cosine and L1-distance maps."""
    u, pn = _normalize_rows(pair_vectors)
    v, en = _normalize_rows(entity_vectors)

    # cosine backward through the row normalizations
    du = dscores @ v
    dv = dscores.T @ u
    dpair = (du - (du * u).sum(axis=1, keepdims=True) * u) / np.where(pn == 0, 1, pn)
    dent = (dv - (dv * v).sum(axis=1, keepdims=True) * v) / np.where(en == 0, 1, en)
    dpair[pn[:, 0] == 0] = 0.0
    dent[en[:, 0] == 0] = 0.0

    # L1-distance backward, chunked like the forward
    chunk = 64
    for s in range(0, pair_vectors.shape[0], chunk):
        sign = np.sign(pair_vectors[s:s + chunk, None, :] - entity_vectors[None, :, :])
        dpair[s:s + chunk] += np.einsum("bn,bnd->bd", ddiffs[s:s + chunk], sign)
        dent -= np.einsum("bn,bnd->nd", ddiffs[s:s + chunk], sign)
    return dpair.astype(pair_vectors.dtype), dent.astype(entity_vectors.dtype)


def loss_and_vector_grads(pair_vectors, entity_vectors, labels, fp: FocalParams,
                          cell_mask=None):
    """Joint loss plus gradients w.r.t. the raw encoded vectors of both sides."""
    scores = score_batch(pair_vectors, entity_vectors)
    diffs = abs_diff_sums(pair_vectors, entity_vectors)
    loss, dscores, ddiffs = joint_loss_with_grads(scores, diffs, labels, fp, cell_mask)
    dpair, dent = vector_grads(pair_vectors, entity_vectors, dscores, ddiffs)
    return loss, dpair, dent


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 128
    alpha: float = 0.8
    gamma: float = 2.0
    lr_linear: float = 1e-3
    lr_attention: float = 5e-5
    warmup_frac: float = 0.05
    pair_max_len: int = 96
    entity_max_len: int = 32
    seed: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    negative_mode: str = "in_batch"  # or "uniform_k"
    num_negatives: int = 5
    label_splits: tuple[str, ...] = ("train",)
    eval_every: int = 1
    log_every: int = 20

    def focal(self) -> FocalParams:
        return FocalParams(alpha=self.alpha, gamma=self.gamma)


@dataclass
class FinetuneStepReport:
    loss: float
    l1_mean: float
    l2_mean: float
    n_pos: int
    n_neg: int


def _encode_layouts(encoder, layouts, train, rng):
    tokens = np.stack([l.tokens for l in layouts])
    mask = np.stack([l.mask for l in layouts])
    longest = max(l.length for l in layouts)
    trim = min(tokens.shape[1], -(-longest // 8) * 8)
    return encoder.forward(tokens[:, :trim], mask[:, :trim], train=train, rng=rng)


def finetune_step(batch: list[Triple], encoder: Encoder, cat: TokenizedCatalog,
                  label_filter: FilterIndex, optimizer: AdamW, lr_scale: float,
                  config: FinetuneConfig, rng: np.random.Generator,
                  neg_rng: np.random.Generator | None = None) -> FinetuneStepReport:
    """One update: two encoder passes, one n x m cell loss, one optimizer step."""
    fp = config.focal()
    pair_layouts = [assemble_pair(cat, t.head, t.relation, config.pair_max_len)
                    for t in batch]
    pair_out, pair_cache = _encode_layouts(encoder, pair_layouts, True, rng)

    if config.negative_mode == "in_batch":
        ent_ids = np.array([t.tail for t in batch])
        labels = build_label_matrix(batch, label_filter)
        cell_mask = None
    elif config.negative_mode == "uniform_k":
        if neg_rng is None:
            raise ValueError("uniform_k negative sampling needs neg_rng")
        n = len(batch)
        k = config.num_negatives
        tails = np.array([t.tail for t in batch])
        sampled = neg_rng.integers(0, cat.kg.num_entities, size=(n, k))
        ent_ids, inverse = np.unique(np.concatenate([tails, sampled.ravel()]),
                                     return_inverse=True)
        tail_cols = inverse[:n]
        neg_cols = inverse[n:].reshape(n, k)
        labels = np.zeros((n, len(ent_ids)), dtype=np.int8)
        labels[np.arange(n), tail_cols] = 1
        cell_mask = np.zeros((n, len(ent_ids)), dtype=bool)
        cell_mask[np.arange(n), tail_cols] = True
        # a sampled id equal to the row's own tail stays that (positive) cell
        cell_mask[np.arange(n)[:, None], neg_cols] = True
    else:
        raise ValueError(f"unknown negative_mode {config.negative_mode!r}")

    ent_layouts = [assemble_entity(cat, int(e), config.entity_max_len)
                   for e in ent_ids]
    ent_out, ent_cache = _encode_layouts(encoder, ent_layouts, True, rng)

    scores = score_batch(pair_out.pooled, ent_out.pooled)
    diffs = abs_diff_sums(pair_out.pooled, ent_out.pooled)
    loss, dscores, ddiffs = joint_loss_with_grads(scores, diffs, labels, fp, cell_mask)
    if not math.isfinite(loss):
        raise TrainingDiverged(-1, {}, [])
    dpair, dent = vector_grads(pair_out.pooled, ent_out.pooled, dscores, ddiffs)

    grads = encoder.backward(pair_cache, d_pooled=dpair)
    ent_grads = encoder.backward(ent_cache, d_pooled=dent)
    for name, g in ent_grads.items():
        grads[name] += g
    if config.clip_norm:
        clip_global_norm(grads, config.clip_norm)
    optimizer.step(encoder.params, grads, lr_scale)

    considered = labels if cell_mask is None else labels[cell_mask]
    n_pos = int(np.asarray(considered).sum())
    n_cells = labels.size if cell_mask is None else int(cell_mask.sum())
    l1, l2 = _loss_components(scores, diffs, labels, fp, cell_mask)
    return FinetuneStepReport(loss=loss, l1_mean=l1, l2_mean=l2,
                              n_pos=n_pos, n_neg=n_cells - n_pos)


def _loss_components(scores, diffs, labels, fp, cell_mask=None):
    """Mean L1 (focal) and L2 (sigmoid) terms, for reporting."""
    pos = labels.astype(bool)
    p = np.clip((scores.astype(np.float64) + 1.0) / 2.0, _P_EPS, 1.0 - _P_EPS)
    l1 = np.where(pos, -fp.alpha * (1.0 - p) ** fp.gamma * np.log(p),
                  -(1.0 - fp.alpha) * p ** fp.gamma * np.log1p(-p))
    sig = expit(diffs.astype(np.float64))
    l2 = np.where(pos, sig, 1.0 - sig)
    if cell_mask is None:
        return float(l1.mean()), float(l2.mean())
    return float(l1[cell_mask].mean()), float(l2[cell_mask].mean())


def run_finetune(kg: KnowledgeGraph, vocab: Vocabulary, encoder: Encoder,
                 config: FinetuneConfig, log_path=None) -> list[dict]:
    """Fine-tune in place; model selection by validation Hits@10; returns history."""
    cat = TokenizedCatalog(kg, vocab)
    train = kg.splits["train"]
    if not train:
        raise ValueError("empty train split")
    label_filter = build_filter_index(kg, config.label_splits)
    eval_filter = build_filter_index(kg)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    optimizer = AdamW({"linear": config.lr_linear, "attention": config.lr_attention},
                      weight_decay=config.weight_decay)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    history: list[dict] = []
    best_hits10 = -1.0
    best_state = None
    step = 0
    try:
        for epoch in range(config.epochs):
            order = derive_rng(config.seed, _SHUFFLE, epoch).permutation(len(train))
            dropout_rng = derive_rng(config.seed, _DROPOUT, epoch)
            neg_rng = derive_rng(config.seed, _NEGATIVES, epoch)
            epoch_loss = 0.0
            for start in range(0, len(train), config.batch_size):
                ids = [int(i) for i in order[start:start + config.batch_size]]
                batch = [train[i] for i in ids]
                lr_scale = warmup_linear_decay(step, total_steps, config.warmup_frac)
                try:
                    report = finetune_step(batch, encoder, cat, label_filter,
                                           optimizer, lr_scale, config,
                                           rng=dropout_rng, neg_rng=neg_rng)
                except TrainingDiverged:
                    raise TrainingDiverged(step, optimizer.learning_rates(lr_scale),
                                           ids) from None
                epoch_loss += report.loss
                if log_fh and step % config.log_every == 0:
                    log_fh.write(json.dumps({
                        "step": step, "epoch": epoch, "loss": report.loss,
                        "l1": report.l1_mean, "l2": report.l2_mean,
                        "pos_cells": report.n_pos, "neg_cells": report.n_neg}) + "\n")
                step += 1

            record = {"epoch": epoch, "train_loss": epoch_loss / steps_per_epoch}
            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                val = evaluate_ranking(
                    kg, encoder, "valid", vocab=vocab, cat=cat, filter_index=eval_filter,
                    pair_max_len=config.pair_max_len,
                    entity_max_len=config.entity_max_len)
                record.update(val_hits10=val.hits10, val_mrr=val.mrr, val_mr=val.mr)
                if val.hits10 > best_hits10:
                    best_hits10 = val.hits10
                    best_state = encoder.copy_params()
                    record["best"] = True
            history.append(record)
            logger.info("finetune epoch %d: loss %.4f hits@10 %s", epoch,
                        record["train_loss"], record.get("val_hits10"))
            if log_fh:
                log_fh.write(json.dumps({"epoch_summary": record}) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        encoder.load_params(*best_state)
    return history
