"""Meta-learning loop: parameter partition, per-user adaptation, the
first-order meta update, the training loop and checkpoint serialization.

The transition model (both GRUs and the three dense heads) is the adapted
partition: each episode clones it and takes gradient steps on the support
loss.  Item embeddings, the autoencoder bank, the GCN and the conditioning
heads are shared and move only in the meta update.  The meta update is
first-order: gradients taken at the adapted weights are applied to the
originals.
"""
from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .clustering import cluster_batch_loss, init_cluster_params
from .config import RunConfig
from .data import Corpus, TaskEpisode, sample_episode
from .errors import (
    CompatibilityError,
    ConfigurationError,
    ContractError,
    DomainError,
    FormatError,
    IngestIOError,
    TrainingError,
)
from .objective import query_loss, support_loss
from .transition import ADAPTED_PREFIXES, init_transition_params

log = logging.getLogger(__name__)

ADAPTED, SHARED = "ADAPTED", "SHARED"

CHECKPOINT_MAGIC = b"CSEQ1"
CHECKPOINT_VERSION = 1
_PARTITION_BYTE = {ADAPTED: b"A", SHARED: b"S"}
_PARTITION_FROM_BYTE = {b"A": ADAPTED, b"S": SHARED}


class ParameterStore(dict):
    """Ordered name -> Variable mapping with a partition label per entry."""

    def __init__(self):
        super().__init__()
        self.partition: dict[str, str] = {}

    def register(self, name: str, var: Variable, label: str):
        if label not in (ADAPTED, SHARED):
            raise ConfigurationError(f"unknown partition label {label!r} for {name}")
        if name in self:
            raise ConfigurationError(f"duplicate parameter name {name}")
        self[name] = var
        self.partition[name] = label

    def adapted_names(self) -> list[str]:
        return [n for n in self if self.partition[n] == ADAPTED]

    def shared_names(self) -> list[str]:
        return [n for n in self if self.partition[n] == SHARED]

    def adapted_view(self) -> "ParameterStore":
        """Copy with fresh adapted Variables; shared entries stay aliased."""
        view = ParameterStore()
        for name, var in self.items():
            label = self.partition[name]
            if label == ADAPTED:
                view.register(name, ad.parameter(var.value.copy()), label)
            else:
                view.register(name, var, label)
        return view


def partition_label(name: str) -> str:
    return ADAPTED if name.startswith(ADAPTED_PREFIXES) else SHARED


def partition_parameters(store: ParameterStore) -> ParameterStore:
    """Validate that every parameter carries a partition label."""
    unlabeled = [n for n in store if n not in store.partition]
    if unlabeled:
        raise ConfigurationError(f"parameters without partition label: {unlabeled}")
    return store


def build_parameter_store(item_count: int, cfg: RunConfig, seed=None) -> ParameterStore:
    """Initialize all model parameters from one deterministic stream."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else seed, 0x1217]))
    store = ParameterStore()
    for name, var in init_transition_params(item_count, cfg, rng).items():
        store.register(name, var, partition_label(name))
    for name, var in init_cluster_params(cfg, rng).items():
        store.register(name, var, SHARED)
    return partition_parameters(store)


# ---------------------------------------------------------------------------
# adaptation and meta step


def adapt(store: ParameterStore, episode: TaskEpisode, cfg: RunConfig) -> ParameterStore:
    """Inner loop: gradient-descend the support loss on the adapted partition.

    The incoming store is never mutated; shared parameters are frozen (their
    gradients are simply not applied).
    """
    view = store.adapted_view()
    adapted = view.adapted_names()
    for _ in range(cfg.inner_steps):
        loss = support_loss(episode, view, cfg)
        if not np.isfinite(float(loss.value)):
            # a poisoned episode cannot adapt; the outer step's finiteness
            # guard will discard the whole batch
            log.warning("adapt: non-finite support loss for user %d", episode.user)
            break
        grads = ad.backward(loss, {n: view[n] for n in adapted})
        for name in adapted:
            view[name] = ad.parameter(view[name].value - cfg.inner_lr * grads[name])
    return view


@dataclass
class StepStats:
    mean_query_loss: float
    cluster_loss: float
    total: float
    skipped: bool = False


def meta_step(episodes: list, item_sets: list, store: ParameterStore,
              cfg: RunConfig) -> StepStats:
    """One outer update over a batch of episodes.

    Each episode adapts its own transition weights, then contributes a query
    hinge; the batch of raw query-step prediction vectors feeds the
    clustering objective (``item_sets`` holds each episode user's interacted
    items for the relation graph).  The summed objective is differentiated
    once and first-order gradients are applied to the original parameters.
    """
    if len(episodes) < 2:
        raise ContractError(f"meta_step: need at least 2 episodes, got {len(episodes)}")
    if len(item_sets) != len(episodes):
        raise ContractError("meta_step: one item set per episode required")
    views = []
    q_losses = []
    embeddings = []
    try:
        for episode in episodes:
            view = adapt(store, episode, cfg)
            loss, p = query_loss(episode, view, cfg)
            views.append(view)
            q_losses.append(loss)
            embeddings.append(p)

        total = ad.add_n(q_losses)
        cluster_value = 0.0
        if cfg.use_clustering:
            batch = cluster_batch_loss(embeddings, item_sets, store, cfg)
            total = ad.add(total, batch.loss)
            cluster_value = float(batch.loss.value)
    except DomainError as exc:
        # non-finite activations abort the forward pass; discard the batch
        log.warning("meta_step: %s, step skipped", exc)
        return StepStats(float("nan"), float("nan"), float("nan"), skipped=True)

    total_value = float(total.value)
    if not np.isfinite(total_value):
        log.warning("meta_step: non-finite objective, step skipped")
        return StepStats(float("nan"), float("nan"), total_value, skipped=True)

    table = ad.grad_table(total)
    for name in store.adapted_names():
        grad = None
        for view in views:
            g = table.get(id(view[name]))
            if g is None:
                continue
            grad = g if grad is None else grad + g
        if grad is not None and cfg.meta_lr:
            store[name].value -= cfg.meta_lr * grad
    for name in store.shared_names():
        g = table.get(id(store[name]))
        if g is not None and cfg.meta_lr:
            store[name].value -= cfg.meta_lr * g

    mean_q = float(np.mean([float(l.value) for l in q_losses]))
    return StepStats(mean_q, cluster_value, total_value)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs: int
    log_rows: list = field(default_factory=list)


def train(corpus: Corpus, cfg: RunConfig, out_dir: str | Path) -> TrainResult:
    """Meta-train on the corpus's train users and write checkpoint plus log.

    Every epoch visits ceil(train_users / batch_size) uniformly sampled
    batches.  With zero epochs the written checkpoint equals initialization.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_users = corpus.train_users()
    if len(train_users) < 2:
        raise TrainingError(f"need at least 2 train users, got {len(train_users)}")
    store = build_parameter_store(corpus.item_count, cfg)
    episode_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    batches = max(1, int(np.ceil(len(train_users) / cfg.batch_size)))
    users = np.asarray(train_users)

    log_rows = []
    log_path = out / "training_log.csv"
    ckpt_path = out / "model.ckpt"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_query_loss", "cluster_loss", "seconds"])
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            q_values, c_values = [], []
            for _ in range(batches):
                chosen = episode_rng.choice(users, size=min(cfg.batch_size, len(users)),
                                            replace=len(users) < cfg.batch_size)
                episodes = [sample_episode(corpus, int(u), cfg.k_shots, episode_rng)
                            for u in chosen]
                sets = [corpus.item_set(int(u)) for u in chosen]
                stats = meta_step(episodes, sets, store, cfg)
                if not stats.skipped:
                    q_values.append(stats.mean_query_loss)
                    c_values.append(stats.cluster_loss)
            elapsed = time.perf_counter() - started
            row = [
                epoch,
                f"{np.mean(q_values):.6f}" if q_values else "nan",
                f"{np.mean(c_values):.6f}" if c_values else "nan",
                f"{elapsed:.3f}",
            ]
            writer.writerow(row)
            log_rows.append(row)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(store, out / f"model_epoch{epoch + 1}.ckpt")
    save_checkpoint(store, ckpt_path)
    return TrainResult(ckpt_path, log_path, cfg.epochs, log_rows)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(store: ParameterStore, path: str | Path) -> None:
    """Serialize parameters: magic, version, then one record per parameter
    (name, partition byte, rank, dims, float32 payload), all little-endian."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(store))
    for name in store:
        encoded = name.encode("utf-8")
        value = store[name].value
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += _PARTITION_BYTE[store.partition[name]]
        buf += struct.pack("<I", value.ndim)
        for dim in value.shape:
            buf += struct.pack("<I", dim)
        buf += value.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> ParameterStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestIOError(f"cannot read {path}: {exc}") from None
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: checkpoint truncated")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        label_byte = take(1)
        label = _PARTITION_FROM_BYTE.get(label_byte)
        if label is None:
            raise FormatError(f"{path}: unknown partition byte {label_byte!r} for {name}")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        store.register(name, ad.parameter(payload.reshape(shape)), label)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return store


def check_compatibility(store: ParameterStore, corpus: Corpus) -> None:
    table = store.get("item_embeddings")
    if table is None:
        raise CompatibilityError("checkpoint has no item embedding table")
    if table.value.shape[0] != corpus.item_count:
        raise CompatibilityError(
            f"checkpoint vocabulary {table.value.shape[0]} != corpus items {corpus.item_count}"
        )
