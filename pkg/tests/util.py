"""Shared test fixtures: dataset writers, toy-KG generators, and the naive
reference implementations (oracles) the production code is checked against."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

DATA_ENV = "KGLP_DATA_DIR"


def dataset_root() -> Path | None:
    """Benchmark dataset root: $KGLP_DATA_DIR, else ./data if it exists."""
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    default = Path(__file__).resolve().parent.parent / "data"
    return default if default.is_dir() else None


def benchmark_dir(name: str) -> Path | None:
    root = dataset_root()
    if root is None:
        return None
    candidate = root / name
    return candidate if (candidate / "train.tsv").is_file() else None


def write_dataset(directory, splits: dict, entity_texts=None, entity_longs=None,
                  relation_texts=None) -> Path:
    """Materialize an in-memory triple dict as a dataset directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        with open(directory / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for h, r, t in splits.get(name, []):
                fh.write(f"{h}\t{r}\t{t}\n")
    for fname, mapping in (("entity2text.tsv", entity_texts),
                           ("entity2textlong.tsv", entity_longs),
                           ("relation2text.tsv", relation_texts)):
        if mapping is not None:
            with open(directory / fname, "w", encoding="utf-8") as fh:
                for ident, text in mapping.items():
                    fh.write(f"{ident}\t{text}\n")
    return directory


def make_pair_dataset(directory, n_pairs=80, seed=2, hold_frac=0.18) -> Path:
    """Learnable transductive KG: paired entities share a distinguishing token.

    Facts (a_i, linksto, b_i) and (b_i, partner, a_i); at most one fact per
    pair is held out so every entity keeps training signal.
    """
    rng = np.random.default_rng(seed)
    rows = {"train": [], "valid": [], "test": []}
    for i in range(n_pairs):
        f1 = (f"a{i:03d}", "linksto", f"b{i:03d}")
        f2 = (f"b{i:03d}", "partner", f"a{i:03d}")
        if rng.random() < hold_frac:
            held, kept = (f1, f2) if rng.random() < 0.5 else (f2, f1)
            rows["test" if rng.random() < 0.5 else "valid"].append(held)
            rows["train"].append(kept)
        else:
            rows["train"] += [f1, f2]
    entity_texts = {}
    entity_longs = {}
    for i in range(n_pairs):
        entity_texts[f"a{i:03d}"] = f"alpha item{i:03d}"
        entity_texts[f"b{i:03d}"] = f"beta item{i:03d}"
        entity_longs[f"a{i:03d}"] = f"marker item{i:03d} from the alpha side"
        entity_longs[f"b{i:03d}"] = f"marker item{i:03d} from the beta side"
    return write_dataset(directory, rows, entity_texts, entity_longs,
                         {"linksto": "links to", "partner": "partner of"})


def random_toy_dataset(directory, rng: np.random.Generator,
                       max_entities=50, max_relations=5) -> Path:
    """Small random KG for oracle-equivalence checks (untrained models)."""
    n_ent = int(rng.integers(5, max_entities + 1))
    n_rel = int(rng.integers(1, max_relations + 1))
    ents = [f"e{i:02d}" for i in range(n_ent)]
    rels = [f"r{j}" for j in range(n_rel)]
    n_facts = int(rng.integers(n_ent, 4 * n_ent))
    facts = set()
    while len(facts) < n_facts:
        facts.add((ents[rng.integers(n_ent)], rels[rng.integers(n_rel)],
                   ents[rng.integers(n_ent)]))
    facts = sorted(facts)
    order = rng.permutation(len(facts))
    n_hold = max(1, len(facts) // 6)
    rows = {"train": [], "valid": [], "test": []}
    for pos, j in enumerate(order):
        split = "test" if pos < n_hold else "valid" if pos < 2 * n_hold else "train"
        rows[split].append(facts[j])
    texts = {e: f"entity {e} {rng.integers(100)}" for e in ents}
    return write_dataset(directory, rows, texts, None,
                         {r: f"relation {r}" for r in rels})


# ------------------------------------------------------------------ oracles

def naive_rank(scores, gold: int, known_true: set[int]) -> int:
    """Reference filtered mid-rank via an explicit sorted candidate list."""
    candidates = [(float(s), i) for i, s in enumerate(scores)
                  if i == gold or i not in known_true]
    candidates.sort(key=lambda pair: -pair[0])
    gold_score = float(scores[gold])
    greater = sum(1 for s, i in candidates if s > gold_score)
    tied = sum(1 for s, i in candidates if s == gold_score and i != gold)
    return 1 + greater + math.ceil(tied / 2)


def naive_label_matrix(batch, truth: dict) -> np.ndarray:
    """Double-loop dict-membership oracle for the in-batch label matrix."""
    n = len(batch)
    y = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(n):
            key = (batch[i].head, batch[i].relation)
            if batch[j].tail in truth.get(key, set()) or i == j:
                y[i, j] = 1
    return y


def naive_cosine(pair_vectors, entity_vectors) -> np.ndarray:
    """Entry-by-entry scalar cosine."""
    n, m = len(pair_vectors), len(entity_vectors)
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            u, v = pair_vectors[i], entity_vectors[j]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            out[i, j] = 0.0 if nu == 0 or nv == 0 else float(np.dot(u, v) / (nu * nv))
    return out


def scalar_joint_loss(scores, diff_sums, labels, alpha, gamma,
                      cell_mask=None) -> float:
    """Independent scalar implementation of the focal + sigmoid cell loss."""
    total = 0.0
    count = 0
    n, m = np.asarray(scores).shape
    for i in range(n):
        for j in range(m):
            if cell_mask is not None and not cell_mask[i][j]:
                continue
            p = (float(scores[i][j]) + 1.0) / 2.0
            p = min(max(p, 1e-6), 1.0 - 1e-6)
            sig = 1.0 / (1.0 + math.exp(-float(diff_sums[i][j])))
            if labels[i][j] == 1:
                l1 = -alpha * (1.0 - p) ** gamma * math.log(p)
                l2 = sig
            else:
                l1 = -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)
                l2 = 1.0 - sig
            total += l1 + l2
            count += 1
    return total / count


def run_pipeline(kg, vocab, seed: int, pretrain_epochs: int, finetune_epochs: int,
                 *, hidden_size=64, num_layers=2, ff_size=128, max_len=32,
                 batch_size=16, pretrain_lr=(1e-3, 5e-4), finetune_lr=(1e-3, 5e-4),
                 pair_max_len=32, entity_max_len=16, pretraining="multi",
                 negative_mode="in_batch", num_negatives=5, finetune_batch=None,
                 patience=10_000):
    """Train a compact model end to end on an augmented graph; returns the encoder.

    ``pretraining`` is "multi" (all three masking tasks), "mlm" (token masking
    only), or "none" (skip straight to fine-tuning from random initialization).
    """
    import kglp
    from kglp.finetune import FinetuneConfig, run_finetune
    from kglp.pretrain import PretrainConfig, run_pretraining

    encoder = kglp.Encoder(kglp.EncoderConfig(
        vocab_size=vocab.size, hidden_size=hidden_size, num_layers=num_layers,
        num_heads=4, ff_size=ff_size, max_len=max(max_len, pair_max_len)),
        seed=seed)
    if pretraining != "none" and pretrain_epochs > 0:
        run_pretraining(kg, vocab, encoder, PretrainConfig(
            epochs=pretrain_epochs, batch_size=batch_size, max_len=max_len,
            seed=seed, lr_linear=pretrain_lr[0], lr_attention=pretrain_lr[1],
            patience=patience, mlm_only=(pretraining == "mlm")))
    run_finetune(kg, vocab, encoder, FinetuneConfig(
        epochs=finetune_epochs, batch_size=finetune_batch or batch_size,
        seed=seed, pair_max_len=pair_max_len, entity_max_len=entity_max_len,
        lr_linear=finetune_lr[0], lr_attention=finetune_lr[1], eval_every=10,
        negative_mode=negative_mode, num_negatives=num_negatives))
    return encoder


def rel_error(numeric: float, analytic: float, floor: float = 1e-4) -> float:
    """Mixed relative/absolute gradient-check error with a magnitude floor."""
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)


class ForcedRng:
    """Stand-in rng whose random() draws are forced to a constant."""

    def __init__(self, value: float, integer: int = 5):
        self.value = value
        self.integer = integer

    def random(self, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)

    def integers(self, low, high, size=None):
        return np.full(size, self.integer) if size is not None else self.integer
