"""Vocabulary induction, tokenization, and model input assembly.

The vocabulary is word-level: text is lowercased and split on whitespace and
punctuation (punctuation is a delimiter, not a token), out-of-vocabulary words
map to [UNK]. Five reserved ids are fixed: PAD=0, UNK=1, CLS=2, SEP=3, MASK=4;
corpus induction can never produce them because bracketed names do not survive
tokenization.

Assembled sequences follow the layout
    [CLS] head head_desc [SEP] relation [SEP] tail tail_desc [SEP]
for full triples, with pair ([CLS] head head_desc [SEP] relation [SEP]) and
entity ([CLS] entity entity_desc [SEP]) variants used by the Siamese stage.
A name and its description are adjacent regions with no separator between
them, i.e. plain concatenation at word level (a single space, effectively).
When a sequence exceeds ``max_len``, descriptions are truncated first
(proportionally to their lengths), then entity names; the relation and the
separators are kept (the relation is cut only if it alone cannot fit).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import KnowledgeGraph, corpus_texts

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
NUM_RESERVED = len(RESERVED_TOKENS)

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Bijective token<->id map with fixed reserved ids 0..4."""

    def __init__(self, corpus_tokens: list[str]):
        self.id_to_token = RESERVED_TOKENS + list(corpus_tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        """One token per line; the line number is the id; lines 0-4 are reserved."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        if tokens[:NUM_RESERVED] != RESERVED_TOKENS:
            raise ValueError(f"{path}: first {NUM_RESERVED} lines must be the reserved tokens")
        return cls(tokens[NUM_RESERVED:])


def build_vocab(kg: KnowledgeGraph, min_freq: int = 1) -> Vocabulary:
    """Induce a vocabulary from the catalog texts of ``kg``.

    Tokens with corpus frequency >= min_freq enter the vocabulary, ordered by
    frequency descending then lexicographically, after the reserved ids. Build
    from the augmented graph so inverse-relation marker words are covered.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter = Counter()
    for text in corpus_texts(kg):
        counts.update(split_words(text))
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids for ``text``; OOV words map to UNK; empty text gives []."""
    return [vocab.token_to_id.get(w, UNK_ID) for w in split_words(text)]


@dataclass
class SequenceLayout:
    """A fixed-length token sequence with named region spans.

    ``tokens`` has exactly ``max_len`` entries (PAD-filled tail); ``mask`` is 1
    on the non-PAD prefix; ``spans`` maps region name to a half-open [begin, end)
    interval; empty regions are zero-width.
    """

    tokens: np.ndarray
    mask: np.ndarray
    spans: dict[str, tuple[int, int]]
    length: int

    def region_tokens(self, region: str) -> np.ndarray:
        begin, end = self.spans[region]
        return self.tokens[begin:end]


def _proportional_split(budget: int, len_a: int, len_b: int) -> tuple[int, int]:
    """Split ``budget`` positions over two regions proportionally to their lengths."""
    total = len_a + len_b
    if total <= budget:
        return len_a, len_b
    if budget <= 0:
        return 0, 0
    keep_a = budget * len_a // total
    keep_b = budget - keep_a
    if keep_b > len_b:
        keep_a += keep_b - len_b
        keep_b = len_b
    return keep_a, keep_b


def _fit_regions(max_len: int, n_special: int, ent_a: list[int], desc_a: list[int],
                 rel: list[int], ent_b: list[int], desc_b: list[int]):
    """Apply the truncation policy: descriptions first (proportionally), then
    entity names, then (only as a last resort) the relation."""
    budget = max(0, max_len - n_special)
    rel = rel[:budget]
    budget -= len(rel)
    ka, kb = _proportional_split(budget, len(ent_a), len(ent_b))
    ent_a, ent_b = ent_a[:ka], ent_b[:kb]
    budget -= len(ent_a) + len(ent_b)
    da, db = _proportional_split(budget, len(desc_a), len(desc_b))
    return ent_a, desc_a[:da], rel, ent_b, desc_b[:db]


def _finalize(parts: list[tuple[str, list[int]]], max_len: int) -> SequenceLayout:
    tokens = np.full(max_len, PAD_ID, dtype=np.int32)
    spans = {}
    pos = 0
    for name, toks in parts:
        spans[name] = (pos, pos + len(toks))
        tokens[pos:pos + len(toks)] = toks
        pos += len(toks)
    mask = np.zeros(max_len, dtype=np.int8)
    mask[:pos] = 1
    return SequenceLayout(tokens=tokens, mask=mask, spans=spans, length=pos)


class TokenizedCatalog:
    """Pre-tokenized entity/relation texts of one graph, bound to one vocabulary.

    Assembling model inputs per training sample re-tokenizes nothing; the
    catalog is immutable and shared freely across threads.
    """

    def __init__(self, kg: KnowledgeGraph, vocab: Vocabulary):
        self.kg = kg
        self.vocab = vocab
        self.entity_tokens = [tokenize(t, vocab) for t in kg.entity_names]
        self.entity_desc_tokens = [tokenize(t, vocab) for t in kg.entity_descriptions]
        self.relation_tokens = [tokenize(t, vocab) for t in kg.relation_texts]


def assemble_triple(cat: TokenizedCatalog, head: int, relation: int, tail: int,
                    max_len: int) -> SequenceLayout:
    """Full-triple input: [CLS] head head_desc [SEP] rel [SEP] tail tail_desc [SEP]."""
    if max_len < 16:
        raise ValueError(f"max_len must be >= 16, got {max_len}")
    e_h, d_h, r, e_t, d_t = _fit_regions(
        max_len, 4,
        cat.entity_tokens[head], cat.entity_desc_tokens[head],
        cat.relation_tokens[relation],
        cat.entity_tokens[tail], cat.entity_desc_tokens[tail])
    return _finalize([
        ("cls", [CLS_ID]),
        ("head", e_h), ("head_desc", d_h), ("sep1", [SEP_ID]),
        ("rel", r), ("sep2", [SEP_ID]),
        ("tail", e_t), ("tail_desc", d_t), ("sep3", [SEP_ID]),
    ], max_len)


def assemble_pair(cat: TokenizedCatalog, head: int, relation: int,
                  max_len: int) -> SequenceLayout:
    """Query-side input: [CLS] head head_desc [SEP] rel [SEP]."""
    return assemble_pair_tokens(cat.entity_tokens[head], cat.entity_desc_tokens[head],
                                relation, cat, max_len)


def assemble_pair_tokens(head_tokens: list[int], head_desc_tokens: list[int],
                         relation: int, cat: TokenizedCatalog,
                         max_len: int) -> SequenceLayout:
    """Pair layout for an arbitrary head token sequence (supports free-text heads)."""
    if max_len < 8:
        raise ValueError(f"pair max_len must be >= 8, got {max_len}")
    e_h, d_h, r, _, _ = _fit_regions(max_len, 3, head_tokens, head_desc_tokens,
                                     cat.relation_tokens[relation], [], [])
    return _finalize([
        ("cls", [CLS_ID]),
        ("head", e_h), ("head_desc", d_h), ("sep1", [SEP_ID]),
        ("rel", r), ("sep2", [SEP_ID]),
    ], max_len)


def assemble_entity(cat: TokenizedCatalog, entity: int, max_len: int) -> SequenceLayout:
    """Candidate-side input: [CLS] entity entity_desc [SEP]."""
    if max_len < 4:
        raise ValueError(f"entity max_len must be >= 4, got {max_len}")
    ent = cat.entity_tokens[entity]
    desc = cat.entity_desc_tokens[entity]
    budget = max_len - 2
    keep_ent = min(len(ent), budget)
    keep_desc = max(0, budget - keep_ent)
    return _finalize([
        ("cls", [CLS_ID]),
        ("entity", ent[:keep_ent]), ("entity_desc", desc[:keep_desc]),
        ("sep1", [SEP_ID]),
    ], max_len)


def stack_layouts(layouts: list[SequenceLayout]) -> tuple[np.ndarray, np.ndarray]:
    """Stack layouts into (tokens, mask) batch arrays."""
    tokens = np.stack([l.tokens for l in layouts])
    mask = np.stack([l.mask for l in layouts])
    return tokens, mask
