"""From raw text to masked pre-training samples.

Shows the word-level vocabulary, the region structure of assembled sequences,
and the three masking tasks (head entity, tail entity, relation) with their
two target layers. Run: python demos/02_text_pipeline_and_masking.py
"""

import tempfile
from pathlib import Path

import numpy as np

import kglp
from kglp.sampling import build_pretrain_sample, derive_rng
from kglp.text import PAD_ID, TokenizedCatalog, assemble_pair, assemble_triple

root = Path(tempfile.mkdtemp(prefix="kglp_demo_"))
(root / "train.tsv").write_text("battery\tpowers\tlamp\n")
(root / "valid.tsv").write_text("")
(root / "test.tsv").write_text("")
(root / "entity2text.tsv").write_text("battery\tzinc battery\nlamp\tarc lamp\n")
(root / "entity2textlong.tsv").write_text(
    "battery\tstores charge in zinc plates\nlamp\tburns bright white light\n")
(root / "relation2text.tsv").write_text("powers\tpowers\n")

kg = kglp.augment_inverse(kglp.load_dataset(root))
vocab = kglp.build_vocab(kg, min_freq=1)
print("vocabulary size:", vocab.size)
print("first corpus tokens:", vocab.id_to_token[5:12])

cat = TokenizedCatalog(kg, vocab)
triple = kg.splits["train"][0]


def render(ids):
    return " ".join(vocab.token(int(i)) for i in ids)


layout = assemble_triple(cat, triple.head, triple.relation, triple.tail, max_len=24)
print("\nfull triple sequence:")
print(" ", render(layout.tokens[:layout.length]))
for region, (b, e) in layout.spans.items():
    if e > b:
        print(f"  {region:<10} [{b:2d},{e:2d})  {render(layout.tokens[b:e])}")

# the Siamese stage encodes the two halves separately
pair = assemble_pair(cat, triple.head, triple.relation, max_len=16)
print("\nquery-side sequence :", render(pair.tokens[:pair.length]))

# one sample per masking task; y1 recovers the masked item, y2 the masked tokens
print("\nmasking tasks (x / y1 / y2, '_' where inactive):")
for alpha, label in ((0.1, "head entity masked"), (0.5, "tail entity masked"),
                     (0.9, "relation masked")):
    class Fixed:
        def __init__(self, a): self.a = a
        def random(self, size=None):
            return self.a if size is None else np.full(size, 0.99)
        def integers(self, lo, hi, size=None): return np.full(size, 5)
    sample = build_pretrain_sample(triple, cat, 24, Fixed(alpha))
    n = sample.layout.length
    print(f"\n  {label} ({sample.task})")
    print("   x :", render(sample.x[:n]))
    print("   y1:", " ".join(vocab.token(int(t)) if t != PAD_ID else "_"
                             for t in sample.y1[:n]))

# with a real rng the token-level masking joins in; statistics follow the
# 0.4/0.4/0.2 task draw and the 0.15 selection rate
counts = {}
for i in range(10_000):
    s = build_pretrain_sample(triple, cat, 24, derive_rng(0, 0, i))
    counts[s.task] = counts.get(s.task, 0) + 1
print("\ntask frequencies over 10k draws:",
      {k: round(v / 10_000, 3) for k, v in sorted(counts.items())})
