"""Scoring and margin ranking losses.

A candidate's score is the euclidean distance between the conditioned
prediction vector and the candidate's embedding; smaller is better.  Both
losses are single-negative hinges: the support loss sums one hinge per
support prediction step, the query loss is one hinge on the final
transition.
"""
from __future__ import annotations

from . import autodiff as ad
from .autodiff import Variable
from .clustering import encoding_assignment, film_condition, sharpen_assignment
from .config import RunConfig
from .data import TaskEpisode
from .errors import ContractError
from .transition import predict_vectors


def condition_prediction(p: Variable, params: dict, cfg: RunConfig) -> Variable:
    """Apply cluster conditioning to a raw prediction vector.

    The prediction is assigned by the encoding view, the assignment is
    sharpened, and the conditioned vector is the feature-wise affine of the
    raw prediction.  With clustering disabled this is the identity.
    """
    if not cfg.use_clustering:
        return p
    c = encoding_assignment(p, params, cfg)
    return film_condition(p, sharpen_assignment(c), params)


def prediction_embedding(prefix, params: dict, cfg: RunConfig) -> Variable:
    """Raw next-item prediction vector for a prefix (the user embedding)."""
    return predict_vectors(prefix, params, cfg)[-1]


def score(prefix, target: int, params: dict, cfg: RunConfig) -> Variable:
    """Distance between the conditioned prediction for a prefix and a target
    item's embedding; lower means more likely."""
    conditioned = condition_prediction(prediction_embedding(prefix, params, cfg), params, cfg)
    return ad.l2_distance(conditioned, ad.lookup_embedding(params["item_embeddings"], target))


def _hinge(conditioned: Variable, positive: int, negative: int, params: dict,
           cfg: RunConfig) -> Variable:
    table = params["item_embeddings"]
    d_pos = ad.l2_distance(conditioned, ad.lookup_embedding(table, positive))
    d_neg = ad.l2_distance(conditioned, ad.lookup_embedding(table, negative))
    return ad.apply_activation(ad.shift(ad.sub(d_pos, d_neg), cfg.margin), "relu")


def support_loss(episode: TaskEpisode, params: dict, cfg: RunConfig) -> Variable:
    """Sum of margin hinges over the support prediction steps.

    Step i (one-based over the episode's items) predicts the i-th item from
    the first i-1; steps run from ``support_start_index`` through the last
    support item.  Each step shares one prediction between its positive and
    its negative.
    """
    k = len(episode.support) + 1
    terms = []
    for i in range(cfg.support_start_index, k):
        prefix = episode.support[: i - 1]
        conditioned = condition_prediction(
            prediction_embedding(prefix, params, cfg), params, cfg
        )
        positive = episode.support[i - 1]
        negative = episode.support_negatives[i - 2]
        terms.append(_hinge(conditioned, positive, negative, params, cfg))
    if not terms:
        # Degraded start-index variant with minimal K: an empty sum.
        return ad.constant(0.0)
    return ad.add_n(terms)


def query_loss(episode: TaskEpisode, params: dict, cfg: RunConfig):
    """Single margin hinge on the query transition.

    Returns the loss together with the raw (pre-conditioning) prediction
    vector, which doubles as the user's embedding for the clustering batch.
    """
    if not episode.query_negatives:
        raise ContractError("query_loss: episode has no query negative")
    p = prediction_embedding(episode.support, params, cfg)
    conditioned = condition_prediction(p, params, cfg)
    loss = _hinge(conditioned, episode.query, episode.query_negatives[0], params, cfg)
    return loss, p
