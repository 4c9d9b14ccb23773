"""Knowledge-graph datasets: loading, catalogs, inverse augmentation, filter indices, resplits.

A dataset directory holds three required triple files (``train.tsv``, ``valid.tsv``,
``test.tsv``; one triple per line, three tab-separated raw identifiers) and three
optional text files (``entity2text.tsv``, ``entity2textlong.tsv``,
``relation2text.tsv``; identifier TAB text). Raw identifiers are mapped to dense
0-based indices in lexicographic order, so index assignment never depends on file
order. All structures are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

#: Display-text prefix marking a synthesized inverse relation.
INVERSE_TEXT_PREFIX = "reverse "
#: Raw-identifier suffix marking a synthesized inverse relation.
INVERSE_ID_SUFFIX = "#rev"


class DatasetError(Exception):
    """A dataset directory is missing, incomplete, or inconsistent."""


class TripleParseError(DatasetError):
    """A triple file line does not have exactly three tab-separated fields."""

    def __init__(self, path, line_no: int, line: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(
            f"{path}:{line_no}: expected 3 tab-separated fields, got "
            f"{len(line.split(chr(9)))}: {line!r}"
        )


@dataclass(frozen=True, order=True)
class Triple:
    """A directed fact (head entity, relation, tail entity), all as catalog indices."""

    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Entity/relation catalogs plus train/valid/test triple lists.

    ``entity_ids`` / ``relation_ids`` hold the raw string identifiers; a string's
    position is its dense index. ``relation_base[r]`` is ``r`` for an original
    relation and the original's index for a synthesized inverse.
    """

    entity_ids: list[str]
    entity_names: list[str]
    entity_descriptions: list[str]
    relation_ids: list[str]
    relation_texts: list[str]
    relation_is_inverse: list[bool]
    relation_base: list[int]
    splits: dict[str, list[Triple]]
    augmented: bool = False
    _entity_index: dict[str, int] = field(default_factory=dict, repr=False)
    _relation_index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._entity_index:
            self._entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        if not self._relation_index:
            self._relation_index = {r: i for i, r in enumerate(self.relation_ids)}

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    def split_sizes(self) -> dict[str, int]:
        return {name: len(triples) for name, triples in self.splits.items()}

    def entity_index(self, raw_id: str) -> int:
        return self._entity_index[raw_id]

    def relation_index(self, raw_id: str) -> int:
        return self._relation_index[raw_id]

    def has_entity(self, raw_id: str) -> bool:
        return raw_id in self._entity_index

    def has_relation(self, raw_id: str) -> bool:
        return raw_id in self._relation_index

    def inverse_relation(self, relation: int) -> int:
        """Index of the relation mirroring ``relation`` (requires an augmented graph)."""
        if not self.augmented:
            raise ValueError("graph is not augmented; inverse relations do not exist")
        half = self.num_relations // 2
        return relation + half if relation < half else relation - half

    def all_triples(self):
        for name in SPLITS:
            yield from self.splits[name]


def _read_triple_file(path: Path) -> list[tuple[str, str, str]]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleParseError(path, line_no, line)
            triples.append((fields[0], fields[1], fields[2]))
    return triples


def _read_text_file(path: Path) -> dict[str, str] | None:
    """Read an ``identifier TAB text`` file; returns None when the file is absent."""
    if not path.is_file():
        return None
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            ident, _, text = line.partition("\t")
            mapping[ident] = text
    return mapping


def load_dataset(directory) -> KnowledgeGraph:
    """Load a dataset directory into a KnowledgeGraph with dense catalogs.

    Raises DatasetError when a split file is missing and TripleParseError on a
    malformed line. Identifiers that appear in triples but not in the optional
    text files fall back to the identifier string as name and an empty
    description (logged, never fatal).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")

    raw_splits: dict[str, list[tuple[str, str, str]]] = {}
    for name in SPLITS:
        path = directory / f"{name}.tsv"
        if not path.is_file():
            raise DatasetError(f"missing split file: {path}")
        raw_splits[name] = _read_triple_file(path)

    entity_ids = sorted({t[0] for rows in raw_splits.values() for t in rows}
                        | {t[2] for rows in raw_splits.values() for t in rows})
    relation_ids = sorted({t[1] for rows in raw_splits.values() for t in rows})
    ent_index = {e: i for i, e in enumerate(entity_ids)}
    rel_index = {r: i for i, r in enumerate(relation_ids)}

    names = _read_text_file(directory / "entity2text.tsv")
    longs = _read_text_file(directory / "entity2textlong.tsv")
    rel_texts = _read_text_file(directory / "relation2text.tsv")

    entity_names = [names.get(e, e) if names is not None else e for e in entity_ids]
    entity_descriptions = [longs.get(e, "") if longs is not None else "" for e in entity_ids]
    relation_texts = [rel_texts.get(r, r) if rel_texts is not None else r for r in relation_ids]

    if names is not None:
        missing = sum(1 for e in entity_ids if e not in names)
        if missing:
            logger.warning(
                "%d of %d entities missing from entity2text.tsv; using identifiers as text",
                missing, len(entity_ids))
    if rel_texts is not None:
        missing = sum(1 for r in relation_ids if r not in rel_texts)
        if missing:
            logger.warning(
                "%d of %d relations missing from relation2text.tsv; using identifiers as text",
                missing, len(relation_ids))

    splits: dict[str, list[Triple]] = {}
    for name, rows in raw_splits.items():
        seen: set[Triple] = set()
        triples: list[Triple] = []
        for h, r, t in rows:
            triple = Triple(ent_index[h], rel_index[r], ent_index[t])
            if triple in seen:
                continue
            seen.add(triple)
            triples.append(triple)
        if len(triples) != len(rows):
            logger.warning("%s: dropped %d duplicate triples",
                           name, len(rows) - len(triples))
        splits[name] = triples

    return KnowledgeGraph(
        entity_ids=entity_ids,
        entity_names=entity_names,
        entity_descriptions=entity_descriptions,
        relation_ids=relation_ids,
        relation_texts=relation_texts,
        relation_is_inverse=[False] * len(relation_ids),
        relation_base=list(range(len(relation_ids))),
        splits=splits,
    )


def augment_inverse(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Double the relation catalog with inverses and mirror every triple.

    For every triple (h, r, t) of every split, the same split gains (t, r_rev, h)
    where r_rev = r + num_relations. The inverse display text is the base text
    prefixed with "reverse "; the inverse raw identifier gets a "#rev" suffix.
    Head-prediction queries (?, r, t) are thereafter expressed as (t, r_rev, ?).
    """
    if kg.augmented:
        raise ValueError("graph is already augmented")
    n_rel = kg.num_relations
    relation_ids = kg.relation_ids + [r + INVERSE_ID_SUFFIX for r in kg.relation_ids]
    relation_texts = kg.relation_texts + [INVERSE_TEXT_PREFIX + t for t in kg.relation_texts]
    relation_is_inverse = [False] * n_rel + [True] * n_rel
    relation_base = list(range(n_rel)) + list(range(n_rel))
    splits = {
        name: triples + [Triple(t.tail, t.relation + n_rel, t.head) for t in triples]
        for name, triples in kg.splits.items()
    }
    return KnowledgeGraph(
        entity_ids=kg.entity_ids,
        entity_names=kg.entity_names,
        entity_descriptions=kg.entity_descriptions,
        relation_ids=relation_ids,
        relation_texts=relation_texts,
        relation_is_inverse=relation_is_inverse,
        relation_base=relation_base,
        splits=splits,
        augmented=True,
    )


class FilterIndex:
    """Map from (entity, relation) query keys to the set of known-true completions.

    Built over the requested splits of an augmented graph, so tail queries (h, r)
    and head queries (t, r_rev) are both covered by one tail-side pass. Lookups of
    unknown keys return an empty set.
    """

    def __init__(self, index: dict[tuple[int, int], set[int]], splits: tuple[str, ...]):
        self._index = index
        self.splits = splits

    def __getitem__(self, key: tuple[int, int]) -> set[int]:
        return self._index.get(key, set())

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def keys(self):
        return self._index.keys()


def build_filter_index(kg: KnowledgeGraph, splits: tuple[str, ...] = SPLITS) -> FilterIndex:
    """Index all completions of every (entity, relation) key in the given splits."""
    if not kg.augmented:
        raise ValueError("filter index requires an augmented graph")
    index: dict[tuple[int, int], set[int]] = {}
    for name in splits:
        for triple in kg.splits[name]:
            index.setdefault((triple.head, triple.relation), set()).add(triple.tail)
    return FilterIndex(index, splits)


def resplit_unseen(kg: KnowledgeGraph, ratio: float, seed: int) -> KnowledgeGraph:
    """Repartition the splits so valid/test evaluate entities unseen in training.

    Two disjoint entity sets of size floor(ratio * num_entities) are drawn for
    test and valid. A triple touching any test entity goes to test; otherwise,
    touching any valid entity, to valid; otherwise to train. Training triples
    therefore never contain a held-out entity. Deterministic under a fixed seed.
    """
    if not 0.0 < ratio < 0.5:
        raise ValueError(f"ratio must be in (0, 0.5), got {ratio}")
    if kg.augmented:
        raise ValueError("resplit must happen before inverse augmentation")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(kg.num_entities)
    k = int(ratio * kg.num_entities)
    test_entities = set(int(e) for e in perm[:k])
    valid_entities = set(int(e) for e in perm[k:2 * k])

    new_splits: dict[str, list[Triple]] = {"train": [], "valid": [], "test": []}
    for name in SPLITS:
        for t in kg.splits[name]:
            if t.head in test_entities or t.tail in test_entities:
                new_splits["test"].append(t)
            elif t.head in valid_entities or t.tail in valid_entities:
                new_splits["valid"].append(t)
            else:
                new_splits["train"].append(t)
    return replace(kg, splits=new_splits)


def save_catalogs(kg: KnowledgeGraph, path) -> None:
    """Persist catalogs as JSON; round-trips the identifier<->index bijection exactly."""
    payload = {
        "entity_ids": kg.entity_ids,
        "entity_names": kg.entity_names,
        "entity_descriptions": kg.entity_descriptions,
        "relation_ids": kg.relation_ids,
        "relation_texts": kg.relation_texts,
        "relation_is_inverse": kg.relation_is_inverse,
        "relation_base": kg.relation_base,
        "augmented": kg.augmented,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False)


def load_catalogs(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_splits(kg: KnowledgeGraph, directory) -> None:
    """Write the splits back out as a dataset directory (plus text files).

    The output is itself loadable by :func:`load_dataset`, which is how resplit
    results are materialized.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with open(directory / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for t in kg.splits[name]:
                fh.write(f"{kg.entity_ids[t.head]}\t{kg.relation_ids[t.relation]}"
                         f"\t{kg.entity_ids[t.tail]}\n")
    with open(directory / "entity2text.tsv", "w", encoding="utf-8") as fh:
        for raw, name in zip(kg.entity_ids, kg.entity_names):
            fh.write(f"{raw}\t{name}\n")
    if any(kg.entity_descriptions):
        with open(directory / "entity2textlong.tsv", "w", encoding="utf-8") as fh:
            for raw, desc in zip(kg.entity_ids, kg.entity_descriptions):
                if desc:
                    fh.write(f"{raw}\t{desc}\n")
    with open(directory / "relation2text.tsv", "w", encoding="utf-8") as fh:
        n = kg.num_relations // 2 if kg.augmented else kg.num_relations
        for raw, text in zip(kg.relation_ids[:n], kg.relation_texts[:n]):
            fh.write(f"{raw}\t{text}\n")


def corpus_texts(kg: KnowledgeGraph):
    """All catalog texts, each yielded once (vocabulary induction corpus)."""
    yield from kg.entity_names
    yield from kg.entity_descriptions
    yield from kg.relation_texts


def dataset_statistics(kg: KnowledgeGraph) -> dict:
    """Entity/relation/split counts; relation count is pre-augmentation."""
    sizes = kg.split_sizes()
    n_rel = kg.num_relations // 2 if kg.augmented else kg.num_relations
    return {
        "entities": kg.num_entities,
        "relations": n_rel,
        "train": sizes["train"],
        "valid": sizes["valid"],
        "test": sizes["test"],
        "augmented": kg.augmented,
    }


