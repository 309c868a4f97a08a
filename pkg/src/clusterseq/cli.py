"""Command line interface: preprocess, train, evaluate, sweep,
inspect-clusters and synth.

Options override config-file values, which override defaults.  Every command
echoes its effective configuration into the output directory and exits
nonzero with a single machine-parseable ``error code=<code> ...`` line on
stderr when anything fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, config_from_dict, load_config, thread_cap_from_env
from .data import (
    Corpus,
    ingest_interactions,
    load_corpus,
    preprocess,
    save_corpus,
    split_users,
    write_corpus_stats,
)
from .errors import ClusterSeqError, ConfigurationError
from .evaluation import evaluate, report_json, write_report_csv
from .meta import ParameterStore, check_compatibility, load_checkpoint, train
from .objective import prediction_embedding
from .clustering import encoding_assignment
from .synth import cluster_agreement, contrast_spec, default_spec, write_synthetic_csv

log = logging.getLogger(__name__)

SWEEP_AXES = {
    "k": "k_shots",
    "clusters": "num_clusters",
    "dim": "embed_dim",
    "batch": "batch_size",
}


def _build_config(args) -> RunConfig:
    data = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    overrides = {
        "seed": args.seed,
        "epochs": getattr(args, "epochs", None),
        "k_shots": getattr(args, "k", None),
        "num_clusters": getattr(args, "clusters", None),
        "test_fraction": getattr(args, "test_fraction", None),
        "eval_negatives": getattr(args, "negatives", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if getattr(args, "no_clustering", False):
        data["use_clustering"] = False
    data["max_threads"] = thread_cap_from_env(data.get("max_threads", 1))
    return config_from_dict(data)


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(cfg.to_json())


def _prepare_corpus(data_path: str, cfg: RunConfig) -> Corpus:
    records = ingest_interactions(data_path)
    corpus = preprocess(records, cfg.k_shots, cfg.effective_min_seq_len)
    counts = split_users(corpus, cfg.test_fraction)
    log.info(
        "corpus: %d users (%d train / %d test / %d dropped), %d items",
        corpus.user_count, counts["train"], counts["test"], counts["dropped"],
        corpus.item_count,
    )
    return corpus


def cmd_preprocess(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    corpus = _prepare_corpus(args.data, cfg)
    save_corpus(corpus, out / "corpus.bin")
    write_corpus_stats(corpus, out / "corpus_stats.csv")
    print(f"wrote {out / 'corpus.bin'} ({corpus.user_count} users, "
          f"{corpus.item_count} items)")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    corpus = load_corpus(args.corpus)
    if corpus.k_shots != cfg.k_shots:
        raise ConfigurationError(
            f"corpus was preprocessed with k={corpus.k_shots}, config asks k={cfg.k_shots}"
        )
    result = train(corpus, cfg, out)
    print(f"wrote {result.checkpoint_path} after {result.epochs} epochs")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    corpus = load_corpus(args.corpus)
    report = evaluate(args.checkpoint, corpus, cfg)
    write_report_csv(report, out / "report.csv")
    (out / "report.json").write_text(report_json(report))
    print(f"users={report.users} mrr={report.mrr:.4f} hit@1={report.hit_at_1:.4f} "
          f"hr@10={report.hr_at_10:.4f} ndcg@5={report.ndcg_at_5:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    axis = args.axis
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"sweep values must be integers, got {args.values!r}") from None
    if not values:
        raise ConfigurationError("empty sweep value list")
    deduped = list(dict.fromkeys(values))
    if len(deduped) != len(values):
        log.warning("sweep: duplicate values removed: %s", values)

    rows = []
    for value in deduped:
        row = {"axis": axis, "value": value, "status": "ok",
               "mrr": "", "hit_at_1": "", "hr_at_10": "", "ndcg_at_5": ""}
        try:
            point = cfg.replace(**{SWEEP_AXES[axis]: value})
            point_dir = out / f"{axis}_{value}"
            point_dir.mkdir(parents=True, exist_ok=True)
            corpus = _prepare_corpus(args.data, point)
            result = train(corpus, point, point_dir)
            report = evaluate(result.checkpoint_path, corpus, point)
            row.update(
                mrr=f"{report.mrr:.6f}",
                hit_at_1=f"{report.hit_at_1:.6f}",
                hr_at_10=f"{report.hr_at_10:.6f}",
                ndcg_at_5=f"{report.ndcg_at_5:.6f}",
            )
        except ClusterSeqError as exc:
            row["status"] = f"error:{exc.code}"
            log.warning("sweep %s=%s failed: %s", axis, value, exc)
        rows.append(row)

    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {sweep_path} ({len(rows)} rows)")
    return 0


def cluster_assignments(store: ParameterStore, corpus: Corpus, cfg: RunConfig) -> np.ndarray:
    """Hard encoding-view assignment for every user from their support
    prefix, without adaptation (diagnostics path)."""
    check_compatibility(store, corpus)
    out = np.empty(corpus.user_count, dtype=np.int64)
    with ad.no_grad():
        for user in range(corpus.user_count):
            prefix = [int(x) for x in corpus.sequences[user][: cfg.k_shots - 1]]
            p = prediction_embedding(prefix, store, cfg)
            out[user] = int(np.argmax(encoding_assignment(p, store, cfg).value))
    return out


def cmd_inspect_clusters(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    corpus = load_corpus(args.corpus)
    store = load_checkpoint(args.checkpoint)
    assignments = cluster_assignments(store, corpus, cfg)
    counts = np.bincount(assignments, minlength=cfg.num_clusters)
    usage = counts / counts.sum()
    positive = usage[usage > 0]
    entropy = float(-np.sum(positive * np.log(positive)))

    path = out / "assignments.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user,cluster\n")
        for user in range(corpus.user_count):
            fh.write(f"{corpus.user_ids[user]},{int(assignments[user])}\n")
        for j, count in enumerate(counts):
            fh.write(f"#histogram,{j},{int(count)}\n")
        fh.write(f"#entropy_nats,{entropy:.6f}\n")
    print(f"cluster usage: {counts.tolist()} entropy={entropy:.3f} nats")

    if args.labels:
        labels_by_user = {}
        with open(args.labels, "r", encoding="utf-8") as fh:
            next(fh)  # header
            for line in fh:
                user, label = line.strip().split(",")
                labels_by_user[user] = int(label)
        aligned = [labels_by_user[u] for u in corpus.user_ids if u in labels_by_user]
        chosen = [int(assignments[i]) for i, u in enumerate(corpus.user_ids)
                  if u in labels_by_user]
        agreement = cluster_agreement(chosen, aligned)
        print(f"cluster agreement vs labels: {agreement:.4f}")
    return 0


def cmd_synth(args) -> int:
    spec = {"default": default_spec, "contrast": contrast_spec}[args.preset](seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "interactions.csv"
    labels_path = out / "labels.csv"
    write_synthetic_csv(spec, data_path, labels_path)
    (out / "spec.json").write_text(json.dumps(
        {"preset": args.preset, "seed": spec.seed, "users": spec.users,
         "items": spec.item_count, "mixture": list(spec.mixture),
         "noise": spec.noise}, indent=2) + "\n")
    print(f"wrote {data_path} and {labels_path}")
    return 0


def _add_common(parser: argparse.ArgumentParser, *, epochs=False, k=True):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True, help="output directory")
    if epochs:
        parser.add_argument("--epochs", type=int, default=None)
    if k:
        parser.add_argument("--k", type=int, default=None, help="episode length K")
    parser.add_argument("--clusters", type=int, default=None, help="cluster count M")
    parser.add_argument("--no-clustering", action="store_true",
                        help="disable the clustering module and conditioning")
    parser.add_argument("--test-fraction", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterseq",
        description="Cluster-conditioned meta-learned sequential recommender",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="ingest a CSV and build the corpus cache")
    p.add_argument("--data", required=True, help="interactions CSV")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="meta-train on a corpus cache")
    p.add_argument("--corpus", required=True, help="corpus cache path")
    _add_common(p, epochs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank test users' query items")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--negatives", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate along one axis")
    p.add_argument("--data", required=True, help="interactions CSV")
    p.add_argument("--axis", required=True, help="k | clusters | dim | batch")
    p.add_argument("--values", required=True, help="comma-separated integers")
    _add_common(p, epochs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-clusters", help="per-user assignments and usage")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", default=None, help="ground-truth sidecar CSV")
    _add_common(p)
    p.set_defaults(func=cmd_inspect_clusters)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--preset", choices=("default", "contrast"), default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ClusterSeqError as exc:
        message = str(exc).replace("\n", " ")
        sys.stderr.write(f"error code={exc.code} {message}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
