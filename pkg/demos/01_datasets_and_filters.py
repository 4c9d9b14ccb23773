"""Loading a triple dataset, inverse augmentation, filter indices, resplits.

Builds a five-fact knowledge graph on disk, then walks through everything the
data layer does with it. Run from anywhere: python demos/01_datasets_and_filters.py
"""

import tempfile
from pathlib import Path

import kglp

# a dataset directory is three TSVs of (head, relation, tail) plus optional texts
root = Path(tempfile.mkdtemp(prefix="kglp_demo_"))
(root / "train.tsv").write_text(
    "copper_wire\tconducts\tcurrent\n"
    "copper_wire\tpart_of\tmotor\n"
    "magnet\tpart_of\tmotor\n"
)
(root / "valid.tsv").write_text("magnet\tattracts\tiron_filing\n")
(root / "test.tsv").write_text("current\tpart_of\tmotor\n")
(root / "entity2text.tsv").write_text(
    "copper_wire\tcopper wire\ncurrent\telectric current\n"
    "motor\telectric motor\nmagnet\tbar magnet\niron_filing\tiron filing\n"
)
(root / "relation2text.tsv").write_text(
    "conducts\tconducts\npart_of\tis part of\nattracts\tattracts\n"
)

kg = kglp.load_dataset(root)
print("entities :", kg.entity_ids)
print("relations:", kg.relation_ids)
print("splits   :", kg.split_sizes())

# every triple gains a mirrored (tail, reverse relation, head) companion, so
# head prediction becomes tail prediction over the reversed relation
aug = kglp.augment_inverse(kg)
print("\nafter augmentation:", aug.num_relations, "relations,",
      aug.split_sizes()["train"], "train triples")
r = aug.relation_index("part_of")
print("inverse of 'part_of' reads:", repr(aug.relation_texts[aug.inverse_relation(r)]))

# the filter index answers: which completions of (entity, relation) are known true?
index = kglp.build_filter_index(aug)
wire = aug.entity_index("copper_wire")
motor = aug.entity_index("motor")
print("\nknown tails for (copper_wire, part_of):",
      sorted(aug.entity_ids[t] for t in index[(wire, r)]))
print("known heads for (motor, part_of) via the inverse relation:",
      sorted(aug.entity_ids[t] for t in index[(motor, aug.inverse_relation(r))]))

# resplitting for unseen-entity evaluation: held-out entities never appear in train
resplit = kglp.resplit_unseen(kg, ratio=0.2, seed=4)
train_entities = {e for t in resplit.splits["train"] for e in (t.head, t.tail)}
print("\nresplit sizes:", resplit.split_sizes())
for t in resplit.splits["test"]:
    fresh = [resplit.entity_ids[e] for e in (t.head, t.tail)
             if e not in train_entities]
    print("test triple", (resplit.entity_ids[t.head], resplit.relation_ids[t.relation],
                          resplit.entity_ids[t.tail]), "-> unseen:", fresh)
