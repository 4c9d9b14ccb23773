"""Multi-task pre-training sample construction.

Each sample masks exactly one triple item — the head entity (task ``mem_head``),
the tail entity (``mem_tail``), or the relation (``mrm``) — chosen by a uniform
draw with thresholds 0.4 / 0.4 / 0.2. The masked item's tokens become the
item-level target ``y1`` and its positions are replaced by [MASK]; a masked
entity's description is blanked to [PAD] so the model cannot read the answer
off the description. The remaining content regions receive token-level masking
(selection probability 0.15; a selected token becomes [MASK] with probability
0.8, a random non-reserved token with 0.1, or stays put with 0.1) recorded in
``y2``. Positions are PAD in ``y1``/``y2`` wherever no target exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Triple
from .text import (MASK_ID, NUM_RESERVED, PAD_ID, SequenceLayout,
                   TokenizedCatalog, assemble_triple)

MEM_HEAD, MEM_TAIL, MRM, MLM_ONLY = "mem_head", "mem_tail", "mrm", "mlm"

#: MLM-eligible regions per task: everything except the masked item and its description.
MLM_REGIONS = {
    MEM_HEAD: ("rel", "tail", "tail_desc"),
    MEM_TAIL: ("head", "head_desc", "rel"),
    MRM: ("head", "head_desc", "tail", "tail_desc"),
    MLM_ONLY: ("head", "head_desc", "rel", "tail", "tail_desc"),
}

SELECT_P = 0.15
MASK_P = 0.80


@dataclass
class PretrainSample:
    """Masked input ``x`` with item target ``y1`` and token target ``y2``.

    ``mask`` is the attention mask recomputed from the masked input, so blanked
    description positions are invisible to attention, like the padding tail.
    """

    x: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    mask: np.ndarray
    task: str
    layout: SequenceLayout


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic per-sample stream from (seed, epoch, index)-style keys."""
    return np.random.default_rng(list(keys))


def mask_mlm_region(x: np.ndarray, y2: np.ndarray, regions,
                    rng: np.random.Generator, vocab_size: int) -> None:
    """Apply token-level masking to ``x`` in place over the given spans.

    ``regions`` is an iterable of (begin, end) spans that must lie inside the
    non-PAD content of ``x`` and exclude the masked-item span. Selected
    positions record their original token in ``y2`` before replacement.
    """
    positions = np.concatenate([np.arange(b, e) for b, e in regions]) \
        if regions else np.empty(0, dtype=int)
    if positions.size == 0:
        return
    selected = positions[rng.random(positions.size) < SELECT_P]
    if selected.size == 0:
        return
    y2[selected] = x[selected]
    branch = rng.random(selected.size)
    to_mask = selected[branch < MASK_P]
    # of the rest, half become a random token, half stay unchanged
    rest = selected[branch >= MASK_P]
    coin = rng.random(rest.size)
    to_random = rest[coin > 0.5]
    x[to_mask] = MASK_ID
    if to_random.size:
        x[to_random] = rng.integers(NUM_RESERVED, vocab_size, size=to_random.size)


def _item_spans(task: str, layout: SequenceLayout):
    if task == MEM_HEAD:
        return layout.spans["head"], layout.spans["head_desc"]
    if task == MEM_TAIL:
        return layout.spans["tail"], layout.spans["tail_desc"]
    return layout.spans["rel"], None


def task_for_draw(alpha: float) -> str:
    if alpha < 0.4:
        return MEM_HEAD
    if alpha < 0.8:
        return MEM_TAIL
    return MRM


def build_pretrain_sample(triple: Triple, cat: TokenizedCatalog, max_len: int,
                          rng: np.random.Generator,
                          mlm_only: bool = False) -> PretrainSample:
    """Construct one multi-task sample from a triple.

    With ``mlm_only`` no item is masked (``y1`` stays empty) and token-level
    masking runs over all content regions — the single-task ablation variant.
    """
    layout = assemble_triple(cat, triple.head, triple.relation, triple.tail, max_len)
    x = layout.tokens.copy()
    y1 = np.full(max_len, PAD_ID, dtype=np.int32)
    y2 = np.full(max_len, PAD_ID, dtype=np.int32)

    if mlm_only:
        task = MLM_ONLY
    else:
        task = task_for_draw(rng.random())
        item_span, desc_span = _item_spans(task, layout)
        b, e = item_span
        y1[b:e] = x[b:e]
        x[b:e] = MASK_ID
        if desc_span is not None:
            db, de = desc_span
            x[db:de] = PAD_ID

    mlm_spans = [layout.spans[name] for name in MLM_REGIONS[task]]
    mlm_spans = [(b, e) for b, e in mlm_spans if e > b]
    mask_mlm_region(x, y2, mlm_spans, rng, cat.vocab.size)

    mask = (x != PAD_ID).astype(np.int8)
    return PretrainSample(x=x, y1=y1, y2=y2, mask=mask, task=task, layout=layout)
