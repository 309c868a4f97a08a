"""Cold-start evaluation: leave-one-out ranking against sampled negatives.

Each test user's first K-1 items form the support prefix; the model adapts
on them, then the K-th item is ranked against n sampled negatives by
conditioned distance (smaller is better).  Ranks use pessimistic
tie-breaking: the positive is placed after every negative it ties with.

All per-user randomness (support negatives for adaptation, then the ranking
negatives) comes from a generator seeded by (global seed, dense user id), so
reports are reproducible and independent of iteration order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import Corpus, TaskEpisode, eval_episode, sample_negatives
from .errors import EvaluationError
from .meta import ParameterStore, adapt, check_compatibility, load_checkpoint
from .objective import condition_prediction, prediction_embedding


def rank_positive(positive_score: float, negative_scores) -> int:
    """Rank of the positive among the negatives, where smaller is better.

    Equal scores count against the positive: rank is one plus the number of
    strictly better negatives plus the number of ties.
    """
    scores = np.asarray(negative_scores, dtype=np.float64)
    if not np.isfinite(positive_score) or not np.all(np.isfinite(scores)):
        raise EvaluationError("rank_positive: non-finite score")
    better = int(np.count_nonzero(scores < positive_score))
    ties = int(np.count_nonzero(scores == positive_score))
    return 1 + better + ties


@dataclass
class EvalReport:
    users: int
    negatives: int
    seed: int
    mrr: float
    hit_at_1: float
    hr_at_10: float
    ndcg_at_5: float
    user_rows: list = field(default_factory=list)  # (external user id, rank)

    def metrics(self) -> dict:
        return {
            "users": self.users,
            "negatives": self.negatives,
            "seed": self.seed,
            "mrr": self.mrr,
            "hit_at_1": self.hit_at_1,
            "hr_at_10": self.hr_at_10,
            "ndcg_at_5": self.ndcg_at_5,
        }


def metrics_from_ranks(ranks, negatives: int = 0, seed: int = 0) -> EvalReport:
    """Aggregate rank list into MRR, Hit@1, HR@10 and NDCG@5.

    NDCG@5 credits rank r <= 5 with 1/log2(r+1) and 0 otherwise.  Sums use
    ``math.fsum`` so the result does not depend on summation order.
    """
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise EvaluationError("metrics_from_ranks: empty rank list")
    if any(r < 1 for r in ranks):
        raise EvaluationError("metrics_from_ranks: ranks must be >= 1")
    n = len(ranks)
    mrr = math.fsum(1.0 / r for r in ranks) / n
    hit1 = math.fsum(1.0 if r == 1 else 0.0 for r in ranks) / n
    hr10 = math.fsum(1.0 if r <= 10 else 0.0 for r in ranks) / n
    ndcg5 = math.fsum(1.0 / math.log2(r + 1) if r <= 5 else 0.0 for r in ranks) / n
    return EvalReport(n, negatives, seed, mrr, hit1, hr10, ndcg5)


def user_rank(store: ParameterStore, corpus: Corpus, user: int, cfg: RunConfig,
              seed: int) -> int:
    """Adapt on the user's support prefix and rank their query item."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, user]))
    episode = eval_episode(corpus, user, cfg.k_shots)
    support_negs = tuple(
        int(x) for x in sample_negatives(corpus, user, cfg.k_shots - 2, rng)
    )
    adapted = adapt(
        store,
        TaskEpisode(user, episode.support, episode.query, support_negs, ()),
        cfg,
    )
    negatives = sample_negatives(corpus, user, cfg.eval_negatives, rng)
    with ad.no_grad():
        p = prediction_embedding(episode.support, adapted, cfg)
        conditioned = condition_prediction(p, adapted, cfg).value
    table = adapted["item_embeddings"].value
    pos_score = float(np.linalg.norm(conditioned - table[episode.query]))
    neg_scores = np.linalg.norm(conditioned - table[negatives], axis=1)
    return rank_positive(pos_score, neg_scores)


def evaluate(model: ParameterStore | str | Path, corpus: Corpus, cfg: RunConfig,
             seed: int | None = None, users: list | None = None) -> EvalReport:
    """Rank every test user's query item and aggregate the metrics.

    ``model`` may be a parameter store or a checkpoint path.  ``users``
    restricts evaluation to a subset of test users (for per-group reporting).
    """
    store = model if isinstance(model, ParameterStore) else load_checkpoint(model)
    check_compatibility(store, corpus)
    seed = cfg.seed if seed is None else seed
    targets = corpus.test_users() if users is None else list(users)
    if not targets:
        raise EvaluationError("evaluate: no test users")
    rows = []
    for user in targets:
        rank = user_rank(store, corpus, user, cfg, seed)
        rows.append((corpus.user_ids[user], rank))
    report = metrics_from_ranks([r for _, r in rows], cfg.eval_negatives, seed)
    report.user_rows = rows
    return report


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """Per-user rank rows followed by an aggregate footer."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user,rank\n")
        for user, rank in report.user_rows:
            fh.write(f"{user},{rank}\n")
        for name, value in report.metrics().items():
            fh.write(f"#aggregate,{name},{value}\n")


def report_json(report: EvalReport) -> str:
    return json.dumps(report.metrics(), indent=2, sort_keys=True) + "\n"
