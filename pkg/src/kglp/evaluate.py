"""Filtered ranking evaluation: Hits@{1,3,10}, mean rank, mean reciprocal rank.

Every original triple of the evaluated split contributes two queries: the tail
query (head, relation) with the tail as gold, and the head query rewritten as
(tail, inverse relation) with the head as gold. Candidates known to be true for
the query key (train + valid + test by default) are removed before ranking,
except the gold itself. Ties with the gold score get the mid-rank: ceiling of
half the tied candidates counts against the gold.

Entity embeddings are computed once per evaluation (one encoder pass per
catalog entity), which is the payoff of the Siamese split: scoring a query
against the whole catalog is a single matrix product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import FilterIndex, KnowledgeGraph, build_filter_index
from .encoder import Encoder
from .text import TokenizedCatalog, Vocabulary, assemble_entity, assemble_pair


@dataclass(frozen=True)
class RankingQuery:
    """A (entity, relation) key with its gold completion; head queries arrive
    already rewritten through the inverse relation."""

    entity: int
    relation: int
    gold: int


@dataclass
class RankingReport:
    split: str
    n_queries: int
    hits1: float
    hits3: float
    hits10: float
    mr: float
    mrr: float
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split, "n_queries": self.n_queries,
            "hits1": self.hits1, "hits3": self.hits3, "hits10": self.hits10,
            "mr": self.mr, "mrr": self.mrr, "per_query": self.per_query,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def queries_for_split(kg: KnowledgeGraph, split: str) -> list[RankingQuery]:
    """Two queries per original triple; mirror triples are skipped because they
    would reproduce the same two queries again."""
    if not kg.augmented:
        raise ValueError("evaluation requires an inverse-augmented graph")
    queries = []
    for t in kg.splits[split]:
        if kg.relation_is_inverse[t.relation]:
            continue
        queries.append(RankingQuery(t.head, t.relation, gold=t.tail))
        queries.append(RankingQuery(t.tail, kg.inverse_relation(t.relation), gold=t.head))
    return queries


def precompute_entity_embeddings(encoder: Encoder, cat: TokenizedCatalog,
                                 max_len: int = 32,
                                 batch_size: int = 256) -> np.ndarray:
    """One pooled vector per catalog entity, in catalog order; deterministic."""
    layouts = [assemble_entity(cat, e, max_len) for e in range(cat.kg.num_entities)]
    return _encode_pooled(encoder, layouts, batch_size)


def _encode_pooled(encoder: Encoder, layouts, batch_size: int) -> np.ndarray:
    rows = []
    for start in range(0, len(layouts), batch_size):
        chunk = layouts[start:start + batch_size]
        tokens = np.stack([l.tokens for l in chunk])
        mask = np.stack([l.mask for l in chunk])
        longest = max(l.length for l in chunk)
        trim = min(tokens.shape[1], -(-longest // 8) * 8)
        out = encoder.encode(tokens[:, :trim], mask[:, :trim])
        rows.append(out.pooled)
    return np.concatenate(rows, axis=0)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def rank_from_scores(scores: np.ndarray, gold: int, known_true: set[int]) -> int:
    """Filtered mid-rank of the gold among the candidates.

    Candidates in ``known_true`` other than the gold are discarded; the rank is
    1 + (strictly better survivors) + ceil(ties / 2).
    """
    if not 0 <= gold < scores.shape[0]:
        raise ValueError(f"gold entity {gold} outside the catalog")
    keep = np.ones(scores.shape[0], dtype=bool)
    exclude = known_true - {gold}
    if exclude:
        keep[list(exclude)] = False
    g = scores[gold]
    kept = scores[keep]
    greater = int((kept > g).sum())
    ties = int((kept == g).sum()) - 1  # the gold ties with itself
    return 1 + greater + (ties + 1) // 2


def rank_query(query: RankingQuery, encoder: Encoder, cat: TokenizedCatalog,
               entity_table: np.ndarray, filter_index: FilterIndex,
               pair_max_len: int = 96) -> int:
    """Filtered rank of one query against the precomputed entity table."""
    layout = assemble_pair(cat, query.entity, query.relation, pair_max_len)
    pooled = _encode_pooled(encoder, [layout], batch_size=1)
    scores = (_unit_rows(pooled) @ _unit_rows(entity_table).T)[0]
    return rank_from_scores(scores, query.gold, filter_index[(query.entity, query.relation)])


def aggregate_ranks(ranks: np.ndarray) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    return {
        "hits1": float((ranks <= 1).mean()),
        "hits3": float((ranks <= 3).mean()),
        "hits10": float((ranks <= 10).mean()),
        "mr": float(ranks.mean()),
        "mrr": float((1.0 / ranks).mean()),
    }


def evaluate(kg: KnowledgeGraph, encoder: Encoder, split: str,
             vocab: Vocabulary | None = None, cat: TokenizedCatalog | None = None,
             filter_index: FilterIndex | None = None, pair_max_len: int = 96,
             entity_max_len: int = 32, batch_size: int = 256,
             collect_per_query: bool = True) -> RankingReport:
    """Score every query of a split against the full catalog, filtered."""
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    if cat is None:
        if vocab is None:
            raise ValueError("need a vocabulary or a tokenized catalog")
        cat = TokenizedCatalog(kg, vocab)
    if filter_index is None:
        filter_index = build_filter_index(kg)

    queries = queries_for_split(kg, split)
    if not queries:
        return RankingReport(split=split, n_queries=0, hits1=0.0, hits3=0.0,
                             hits10=0.0, mr=0.0, mrr=0.0)
    table = precompute_entity_embeddings(encoder, cat, entity_max_len, batch_size)
    table_unit = _unit_rows(table)

    pair_layouts = [assemble_pair(cat, q.entity, q.relation, pair_max_len)
                    for q in queries]
    ranks = np.empty(len(queries), dtype=np.int64)
    per_query = []
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        pooled = _encode_pooled(encoder, pair_layouts[start:start + batch_size],
                                batch_size)
        scores = _unit_rows(pooled) @ table_unit.T
        for j, q in enumerate(chunk):
            rank = rank_from_scores(scores[j], q.gold,
                                    filter_index[(q.entity, q.relation)])
            ranks[start + j] = rank
            if collect_per_query:
                per_query.append({"entity": q.entity, "relation": q.relation,
                                  "gold": q.gold, "rank": int(rank)})

    agg = aggregate_ranks(ranks)
    return RankingReport(split=split, n_queries=len(queries), per_query=per_query,
                         **agg)
