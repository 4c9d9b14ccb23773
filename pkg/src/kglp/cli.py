"""Command-line surface: ingest, pretrain, finetune, evaluate, resplit-unseen, predict.

Each command reads/writes a run directory so a full experiment is:

    kglp ingest data/umls --out runs/umls
    kglp pretrain --out runs/umls
    kglp finetune --out runs/umls
    kglp evaluate --out runs/umls --split test
    kglp predict --out runs/umls --head "algorithm" --relation isa -k 5

Every producing command writes a manifest (config snapshot, sha256 of inputs
and outputs, metrics, elapsed seconds) next to its artifacts. Exit codes:
0 success, 1 runtime failure, 2 usage/config error.

Heavy imports happen inside the command functions so ``--threads`` can cap the
BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path


class ArtifactError(Exception):
    """A required artifact is missing; the message names the producing command."""


# --------------------------------------------------------------------- helpers

def _apply_threads(threads: int):
    """Cap the BLAS pool. Env vars cover fresh interpreters; threadpoolctl
    (when available) also caps pools that numpy already initialized."""
    if not threads or threads <= 0:
        return None
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=threads)


def _parse_set_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def _collect_overrides(args) -> dict:
    overrides = _parse_set_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return overrides


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, name: str, command: str, config_snapshot: dict,
                   inputs: dict, outputs: dict, metrics: dict, seed: int,
                   elapsed: float) -> Path:
    manifest = {
        "command": command,
        "created_unix": time.time(),
        "seed": seed,
        "elapsed_sec": round(elapsed, 3),
        "config": config_snapshot,
        "inputs": {str(k): file_sha256(v) for k, v in inputs.items()},
        "outputs": {str(k): file_sha256(v) for k, v in outputs.items()},
        "metrics": metrics,
    }
    path = out_dir / f"manifest.{name}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactError(
            f"refusing to overwrite existing artifacts (use --force): {', '.join(existing)}")


def _dataset_input_files(dataset_dir: Path) -> dict:
    files = {}
    for name in ("train.tsv", "valid.tsv", "test.tsv", "entity2text.tsv",
                 "entity2textlong.tsv", "relation2text.tsv"):
        path = dataset_dir / name
        if path.is_file():
            files[name] = path
    return files


def _load_run_dir(out_dir: Path):
    """Rebuild (kg augmented, vocab, dataset meta) from an ingested run directory."""
    from .data import augment_inverse, load_dataset
    from .text import Vocabulary

    dataset_meta_path = out_dir / "dataset.json"
    if not dataset_meta_path.is_file():
        raise ArtifactError(
            f"{out_dir} has no dataset.json; run `kglp ingest <dataset_dir> --out {out_dir}` first")
    with open(dataset_meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    vocab_path = out_dir / "vocab.txt"
    if not vocab_path.is_file():
        raise ArtifactError(
            f"{out_dir} has no vocab.txt; run `kglp ingest` first")
    kg = augment_inverse(load_dataset(meta["dir"]))
    vocab = Vocabulary.load(vocab_path)
    return kg, vocab, meta


def _build_config(args, meta=None):
    from .config import load_run_config
    overrides = _collect_overrides(args)
    if meta is not None:
        overrides.setdefault("dataset.name", meta.get("name", ""))
        overrides.setdefault("vocab.min_freq", meta.get("min_freq", 1))
        dataset_dir = meta.get("dir")
    else:
        dataset_dir = getattr(args, "dataset_dir", None)
    return load_run_config(getattr(args, "config", None), overrides, dataset_dir)


# -------------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    from .data import (augment_inverse, dataset_statistics, load_dataset,
                       save_catalogs)
    from .text import build_vocab

    started = time.time()
    dataset_dir = Path(args.dataset_dir)
    out_dir = Path(args.out)
    rc = _build_config(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [out_dir / p for p in
                 ("catalog.json", "vocab.txt", "stats.json", "dataset.json")]
    _refuse_overwrite(artifacts, args.force)

    kg = load_dataset(dataset_dir)
    stats = dataset_statistics(kg)
    augmented = augment_inverse(kg)
    vocab = build_vocab(augmented, rc.vocab.min_freq)

    save_catalogs(augmented, out_dir / "catalog.json")
    vocab.save(out_dir / "vocab.txt")
    stats_payload = dict(stats)
    stats_payload.update(vocab_size=vocab.size,
                         augmented_relations=augmented.num_relations,
                         augmented_train=len(augmented.splits["train"]))
    with open(out_dir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats_payload, fh, indent=1)
    with open(out_dir / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump({"dir": str(dataset_dir.resolve()), "name": rc.dataset.name,
                   "min_freq": rc.vocab.min_freq}, fh, indent=1)

    write_manifest(out_dir, "ingest", "ingest", rc.snapshot(),
                   inputs=_dataset_input_files(dataset_dir),
                   outputs={p.name: p for p in artifacts},
                   metrics=stats_payload, seed=rc.seed,
                   elapsed=time.time() - started)

    for key in ("entities", "relations", "train", "valid", "test"):
        print(f"{key:<10}{stats[key]}")
    print(f"vocab     {vocab.size}")
    return 0


def cmd_pretrain(args) -> int:
    from .encoder import Encoder, save_checkpoint
    from .pretrain import run_pretraining

    started = time.time()
    out_dir = Path(args.out)
    kg, vocab, meta = _load_run_dir(out_dir)
    rc = _build_config(args, meta)
    if args.mlm_only:
        rc.pretrain.mlm_only = True
    ckpt_path = out_dir / "pretrain.npz"
    _refuse_overwrite([ckpt_path], args.force)

    encoder = Encoder(rc.encoder.build(vocab.size), seed=rc.seed)
    history = run_pretraining(kg, vocab, encoder, rc.pretrain,
                              log_path=out_dir / "pretrain_log.jsonl")
    save_checkpoint(encoder, ckpt_path)

    best = min(h["val_total"] for h in history)
    write_manifest(out_dir, "pretrain", "pretrain", rc.snapshot(),
                   inputs={"vocab.txt": out_dir / "vocab.txt"},
                   outputs={"pretrain.npz": ckpt_path},
                   metrics={"epochs_run": len(history), "best_val_loss": best},
                   seed=rc.seed, elapsed=time.time() - started)
    print(ckpt_path)
    return 0


def cmd_finetune(args) -> int:
    from .encoder import Encoder, load_checkpoint, save_checkpoint
    from .evaluate import precompute_entity_embeddings
    from .finetune import run_finetune
    from .text import TokenizedCatalog
    import numpy as np

    started = time.time()
    out_dir = Path(args.out)
    kg, vocab, meta = _load_run_dir(out_dir)
    rc = _build_config(args, meta)
    ckpt_out = out_dir / "finetune.npz"
    table_out = out_dir / "entity_table.npz"
    _refuse_overwrite([ckpt_out, table_out], args.force)

    inputs = {"vocab.txt": out_dir / "vocab.txt"}
    if args.checkpoint == "none":
        encoder = Encoder(rc.encoder.build(vocab.size), seed=rc.seed)
    else:
        ckpt_in = Path(args.checkpoint) if args.checkpoint else out_dir / "pretrain.npz"
        if not ckpt_in.is_file():
            raise ArtifactError(
                f"checkpoint {ckpt_in} not found; run `kglp pretrain --out {out_dir}` "
                f"first or pass --checkpoint none for a random initialization")
        encoder = load_checkpoint(ckpt_in)
        if encoder.config.vocab_size != vocab.size:
            raise ArtifactError(
                f"checkpoint vocab size {encoder.config.vocab_size} does not match "
                f"vocab.txt ({vocab.size}); re-run ingest/pretrain together")
        inputs["checkpoint"] = ckpt_in

    history = run_finetune(kg, vocab, encoder, rc.finetune,
                           log_path=out_dir / "finetune_log.jsonl")
    save_checkpoint(encoder, ckpt_out)
    table = precompute_entity_embeddings(encoder, TokenizedCatalog(kg, vocab),
                                         rc.finetune.entity_max_len)
    np.savez(table_out, table=table, checkpoint_sha256=np.array(file_sha256(ckpt_out)))

    best = max((h.get("val_hits10", -1.0) for h in history), default=-1.0)
    write_manifest(out_dir, "finetune", "finetune", rc.snapshot(), inputs=inputs,
                   outputs={"finetune.npz": ckpt_out, "entity_table.npz": table_out},
                   metrics={"epochs_run": len(history), "best_val_hits10": best},
                   seed=rc.seed, elapsed=time.time() - started)
    print(ckpt_out)
    return 0


def cmd_evaluate(args) -> int:
    from .encoder import load_checkpoint
    from .evaluate import evaluate

    started = time.time()
    out_dir = Path(args.out)
    kg, vocab, meta = _load_run_dir(out_dir)
    rc = _build_config(args, meta)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out_dir / "finetune.npz"
    if not ckpt_path.is_file():
        raise ArtifactError(
            f"checkpoint {ckpt_path} not found; run `kglp finetune --out {out_dir}` first")
    report_path = out_dir / f"report_{args.split}.json"
    _refuse_overwrite([report_path], args.force)
    encoder = load_checkpoint(ckpt_path)

    report = evaluate(kg, encoder, args.split, vocab=vocab,
                      pair_max_len=rc.finetune.pair_max_len,
                      entity_max_len=rc.finetune.entity_max_len)
    report.save(report_path)

    metrics = {k: getattr(report, k) for k in ("hits1", "hits3", "hits10", "mr", "mrr")}
    metrics["n_queries"] = report.n_queries
    write_manifest(out_dir, f"evaluate.{args.split}", "evaluate", rc.snapshot(),
                   inputs={"checkpoint": ckpt_path},
                   outputs={report_path.name: report_path}, metrics=metrics,
                   seed=rc.seed, elapsed=time.time() - started)
    print(f"split={args.split} n_queries={report.n_queries} "
          f"hits@1={report.hits1:.4f} hits@3={report.hits3:.4f} "
          f"hits@10={report.hits10:.4f} mr={report.mr:.2f} mrr={report.mrr:.4f}")
    print(report_path)
    return 0


def cmd_resplit_unseen(args) -> int:
    from .data import dataset_statistics, load_dataset, resplit_unseen, save_splits

    dataset_dir = Path(args.dataset_dir)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ArtifactError(f"output directory {out_dir} is not empty (use --force)")
    kg = load_dataset(dataset_dir)
    seed = args.seed if args.seed is not None else 0
    resplit = resplit_unseen(kg, args.ratio, seed)
    save_splits(resplit, out_dir)
    stats = dataset_statistics(resplit)
    for key in ("entities", "relations", "train", "valid", "test"):
        print(f"{key:<10}{stats[key]}")
    print(out_dir)
    return 0


def cmd_predict(args) -> int:
    import numpy as np
    from .data import build_filter_index
    from .encoder import load_checkpoint
    from .evaluate import _encode_pooled, _unit_rows
    from .text import TokenizedCatalog, assemble_pair, assemble_pair_tokens, tokenize

    out_dir = Path(args.out)
    kg, vocab, meta = _load_run_dir(out_dir)
    rc = _build_config(args, meta)
    pair_max_len = rc.finetune.pair_max_len
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out_dir / "finetune.npz"
    if not ckpt_path.is_file():
        raise ArtifactError(
            f"checkpoint {ckpt_path} not found; run `kglp finetune --out {out_dir}` first")
    table_path = out_dir / "entity_table.npz"
    if not table_path.is_file():
        raise ArtifactError(
            f"entity table {table_path} not found; run `kglp finetune --out {out_dir}` first")
    encoder = load_checkpoint(ckpt_path)
    with np.load(table_path, allow_pickle=False) as data:
        table = data["table"]

    if not kg.has_relation(args.relation):
        raise ArtifactError(
            f"unknown relation {args.relation!r}; known relations live in catalog.json "
            f"(inverse forms end in '#rev')")
    relation = kg.relation_index(args.relation)
    cat = TokenizedCatalog(kg, vocab)

    if kg.has_entity(args.head):
        head = kg.entity_index(args.head)
        layout = assemble_pair(cat, head, relation, pair_max_len)
        filter_key = (head, relation)
    else:
        # unseen head: encode the free text itself
        layout = assemble_pair_tokens(tokenize(args.head, vocab), [], relation,
                                      cat, pair_max_len)
        filter_key = None

    pooled = _encode_pooled(encoder, [layout], batch_size=1)
    scores = (_unit_rows(pooled) @ _unit_rows(table).T)[0]

    known = set()
    if args.filtered and filter_key is not None:
        known = build_filter_index(kg)[filter_key]
    order = np.argsort(-scores, kind="stable")
    shown = 0
    for idx in order:
        if int(idx) in known:
            continue
        print(f"{shown + 1:>3} {scores[idx]: .4f}  {kg.entity_ids[idx]}"
              f"  {kg.entity_names[idx]}")
        shown += 1
        if shown >= args.k:
            break
    return 0


# ----------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="config file (key = value lines)")
    shared.add_argument("--seed", type=int, default=None, help="random seed")
    shared.add_argument("--out", required=True, help="run directory")
    shared.add_argument("--force", action="store_true",
                        help="overwrite existing artifacts")
    shared.add_argument("--threads", type=int, default=0,
                        help="cap BLAS threads (0 = library default)")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. --set finetune.epochs=5")

    parser = argparse.ArgumentParser(prog="kglp",
                                     description="knowledge-graph link prediction")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("ingest", parents=[shared],
                       help="load a dataset, build vocabulary and catalogs")
    p.add_argument("dataset_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", parents=[shared],
                       help="masked multi-task pre-training")
    p.add_argument("--mlm-only", action="store_true",
                   help="ablation: token masking only, no item masking")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[shared], help="Siamese fine-tuning")
    p.add_argument("--checkpoint",
                   help="pre-trained checkpoint (default <out>/pretrain.npz; "
                        "'none' trains from random initialization)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[shared], help="filtered ranking metrics")
    p.add_argument("--split", choices=("valid", "test"), required=True)
    p.add_argument("--checkpoint", help="default <out>/finetune.npz")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("resplit-unseen", parents=[shared],
                       help="rewrite splits so valid/test entities are unseen in train")
    p.add_argument("dataset_dir")
    p.add_argument("--ratio", type=float, default=0.1,
                   help="fraction of entities held out per split")
    p.set_defaults(func=cmd_resplit_unseen)

    p = sub.add_parser("predict", parents=[shared], help="top-k completion of (head, relation, ?)")
    p.add_argument("--head", required=True,
                   help="head entity identifier, or free text for unseen heads")
    p.add_argument("--relation", required=True, help="relation identifier")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--filtered", action="store_true",
                   help="hide known-true completions")
    p.add_argument("--checkpoint", help="default <out>/finetune.npz")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limiter = _apply_threads(getattr(args, "threads", 0))
    from .config import ConfigError
    from .data import DatasetError
    from .encoder import CheckpointError
    from .pretrain import TrainingDiverged
    try:
        return args.func(args) or 0
    except (ConfigError, DatasetError, ArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
