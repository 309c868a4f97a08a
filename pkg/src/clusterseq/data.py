"""Interaction ingestion, preprocessing, user splits and episode sampling.

The on-disk protocol is a headerless CSV of ``user,item,timestamp`` rows
(one optional header row is auto-detected).  Preprocessing orders users
globally by first-transaction time (ties broken by external user id), orders
each user's interactions by timestamp (stable w.r.t. input order) and assigns
dense contiguous ids to users and items by order of first appearance in that
global walk.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EpisodeError,
    FormatError,
    IngestIOError,
    SamplingError,
    SplitError,
)

log = logging.getLogger(__name__)

CORPUS_MAGIC = b"CSEQD1"

TRAIN, TEST, DROPPED = 0, 1, 2


class Interaction(NamedTuple):
    user: str
    item: str
    timestamp: int


@dataclass
class Corpus:
    """Dense-id view of a dataset plus the train/test user partition."""

    sequences: list[np.ndarray]
    user_ids: list[str]
    item_ids: list[str]
    k_shots: int
    partition: np.ndarray  # one label per user: TRAIN / TEST / DROPPED
    _item_sets: list[set] = field(default_factory=list, repr=False)

    @property
    def user_count(self) -> int:
        return len(self.sequences)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    def item_set(self, user: int) -> set:
        if not self._item_sets:
            self._item_sets = [set(map(int, seq)) for seq in self.sequences]
        return self._item_sets[user]

    def train_users(self) -> list[int]:
        return [u for u in range(self.user_count) if self.partition[u] == TRAIN]

    def test_users(self) -> list[int]:
        return [u for u in range(self.user_count) if self.partition[u] == TEST]

    def mean_sequence_length(self) -> float:
        if not self.sequences:
            return 0.0
        return float(np.mean([len(s) for s in self.sequences]))


@dataclass(frozen=True)
class TaskEpisode:
    """One user's few-shot task: support items, query item and negatives."""

    user: int
    support: tuple
    query: int
    support_negatives: tuple
    query_negatives: tuple


# ---------------------------------------------------------------------------
# ingestion


def _parse_line(line: str) -> Interaction | None:
    parts = line.split(",")
    if len(parts) != 3:
        return None
    user, item, ts = (p.strip() for p in parts)
    if not user or not item:
        return None
    try:
        stamp = int(ts)
    except ValueError:
        return None
    if stamp < 0:
        return None
    return Interaction(user, item, stamp)


def ingest_interactions(source: str | Path | IO) -> list[Interaction]:
    """Read interaction records from a CSV path or open text stream.

    The first row is treated as a header when its timestamp field is not an
    integer.  Malformed rows are skipped and counted; when more than half of
    the data rows are malformed the file is rejected.
    """
    if isinstance(source, (str, Path)):
        try:
            handle: IO = open(source, "r", encoding="utf-8")
        except OSError as exc:
            raise IngestIOError(f"cannot read {source}: {exc}") from None
    else:
        handle = source
    records: list[Interaction] = []
    malformed = 0
    total = 0
    try:
        for lineno, raw in enumerate(handle):
            line = raw.strip()
            if not line:
                continue
            parsed = _parse_line(line)
            if lineno == 0 and parsed is None:
                continue  # header row
            total += 1
            if parsed is None:
                malformed += 1
                continue
            records.append(parsed)
    except OSError as exc:
        raise IngestIOError(f"read failed: {exc}") from None
    finally:
        if isinstance(source, (str, Path)):
            handle.close()
    if total == 0:
        log.warning("ingest: source contained no interaction records")
        return []
    if malformed * 2 > total:
        raise FormatError(f"ingest: {malformed} of {total} rows malformed")
    if malformed:
        log.warning("ingest: skipped %d malformed rows", malformed)
    return records


def ingest_text(text: str) -> list[Interaction]:
    return ingest_interactions(io.StringIO(text))


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(records: Sequence[Interaction], k_shots: int, min_seq_len: int = 0) -> Corpus:
    """Relabel users and items densely and build per-user item sequences.

    Users with fewer than ``min_seq_len`` interactions are dropped before any
    id is assigned, so dense ids stay contiguous over the surviving users.
    """
    if k_shots < 3:
        raise ConfigurationError(f"k_shots must be >= 3, got {k_shots}")
    min_len = min_seq_len if min_seq_len else k_shots
    if min_len < k_shots:
        raise ConfigurationError(f"min_seq_len ({min_len}) must be >= k_shots ({k_shots})")

    by_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, rec in enumerate(records):
        by_user.setdefault(rec.user, []).append((rec.timestamp, order, rec.item))

    kept = [(min(t for t, _, _ in rows), uid) for uid, rows in by_user.items()
            if len(rows) >= min_len]
    kept.sort()  # (first transaction time, external user id)

    user_ids: list[str] = []
    item_ids: list[str] = []
    item_dense: dict[str, int] = {}
    sequences: list[np.ndarray] = []
    for _, uid in kept:
        rows = sorted(by_user[uid], key=lambda r: (r[0], r[1]))
        seq = np.empty(len(rows), dtype=np.int64)
        for pos, (_, _, item) in enumerate(rows):
            idx = item_dense.get(item)
            if idx is None:
                idx = len(item_ids)
                item_dense[item] = idx
                item_ids.append(item)
            seq[pos] = idx
        user_ids.append(uid)
        sequences.append(seq)

    partition = np.zeros(len(user_ids), dtype=np.uint8)
    return Corpus(sequences, user_ids, item_ids, k_shots, partition)


def split_users(corpus: Corpus, test_fraction: float) -> dict:
    """Label the last ceil(fraction * U) users (by dense id) as test users.

    Test users whose first ``k_shots`` items contain an item absent from every
    train user's sequence cannot be scored cold and are dropped from the test
    partition.  Returns split counts.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    total = corpus.user_count
    if total < 2:
        raise SplitError(f"need at least 2 users to split, got {total}")
    n_test = int(np.ceil(test_fraction * total))
    if n_test >= total:
        raise SplitError(f"test fraction {test_fraction} leaves no train users")
    boundary = total - n_test
    corpus.partition[:] = TRAIN
    corpus.partition[boundary:] = TEST

    train_items: set = set()
    for u in range(boundary):
        train_items.update(corpus.item_set(u))

    dropped = 0
    for u in range(boundary, total):
        prefix = corpus.sequences[u][: corpus.k_shots]
        if any(int(it) not in train_items for it in prefix):
            corpus.partition[u] = DROPPED
            dropped += 1
    kept = n_test - dropped
    if kept == 0:
        raise SplitError(
            "all test users were dropped for unseen items; try a larger test fraction"
        )
    if dropped:
        log.warning("split: dropped %d of %d test users with unseen items", dropped, n_test)
    return {"train": boundary, "test": kept, "dropped": dropped}


# ---------------------------------------------------------------------------
# sampling


def sample_negatives(corpus: Corpus, user: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n distinct items the user never interacted with, uniformly."""
    owned = corpus.item_set(user)
    candidates = np.array(
        [i for i in range(corpus.item_count) if i not in owned], dtype=np.int64
    )
    if candidates.size < n:
        raise SamplingError(
            f"user {user}: only {candidates.size} negative candidates, need {n}"
        )
    return rng.choice(candidates, size=n, replace=False)


def sample_episode(
    corpus: Corpus,
    user: int,
    k: int,
    rng: np.random.Generator,
    train: bool = True,
) -> TaskEpisode:
    """Cut a K-item window and draw its negatives.

    Train episodes use a uniformly random contiguous window; test episodes
    always use the first K items.  Negatives are drawn fresh on every call.
    """
    seq = corpus.sequences[user]
    if len(seq) < k:
        raise EpisodeError(f"user {user}: sequence length {len(seq)} < k={k}")
    start = int(rng.integers(0, len(seq) - k + 1)) if train else 0
    window = seq[start : start + k]
    support = tuple(int(x) for x in window[:-1])
    query = int(window[-1])
    support_negs = tuple(int(x) for x in sample_negatives(corpus, user, k - 2, rng))
    query_negs = tuple(int(x) for x in sample_negatives(corpus, user, 1, rng))
    return TaskEpisode(user, support, query, support_negs, query_negs)


def eval_episode(corpus: Corpus, user: int, k: int) -> TaskEpisode:
    """Deterministic first-K prefix episode used at evaluation time."""
    seq = corpus.sequences[user]
    if len(seq) < k:
        raise EpisodeError(f"user {user}: sequence length {len(seq)} < k={k}")
    support = tuple(int(x) for x in seq[: k - 1])
    return TaskEpisode(user, support, int(seq[k - 1]), (), ())


# ---------------------------------------------------------------------------
# binary cache


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus to the fixed-width little-endian cache format."""
    if corpus.item_count >= 2**32 or corpus.user_count >= 2**32:
        raise FormatError("corpus too large for the cache format")
    buf = bytearray()
    buf += CORPUS_MAGIC
    buf += struct.pack("<III", corpus.user_count, corpus.item_count, corpus.k_shots)
    for u in range(corpus.user_count):
        ext = corpus.user_ids[u].encode("utf-8")
        seq = corpus.sequences[u]
        buf += struct.pack("<I", len(ext))
        buf += ext
        buf += struct.pack("<BI", int(corpus.partition[u]), len(seq))
        buf += seq.astype("<u4").tobytes()
    for item in corpus.item_ids:
        ext = item.encode("utf-8")
        buf += struct.pack("<I", len(ext))
        buf += ext
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("corpus cache truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_corpus(path: str | Path) -> Corpus:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestIOError(f"cannot read {path}: {exc}") from None
    r = _Reader(data)
    if r.take(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
        raise FormatError(f"{path}: bad corpus magic")
    user_count, item_count, k_shots = r.unpack("<III")
    sequences: list[np.ndarray] = []
    user_ids: list[str] = []
    partition = np.zeros(user_count, dtype=np.uint8)
    for u in range(user_count):
        (ext_len,) = r.unpack("<I")
        user_ids.append(r.take(ext_len).decode("utf-8"))
        label, seq_len = r.unpack("<BI")
        partition[u] = label
        seq = np.frombuffer(r.take(4 * seq_len), dtype="<u4").astype(np.int64)
        sequences.append(seq)
    item_ids = []
    for _ in range(item_count):
        (ext_len,) = r.unpack("<I")
        item_ids.append(r.take(ext_len).decode("utf-8"))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Corpus(sequences, user_ids, item_ids, int(k_shots), partition)


def write_corpus_stats(corpus: Corpus, path: str | Path) -> None:
    """Emit headline corpus statistics as a two-row CSV."""
    part = corpus.partition
    rows = [
        ("users", corpus.user_count),
        ("items", corpus.item_count),
        ("mean_seq_len", f"{corpus.mean_sequence_length():.6g}"),
        ("train_users", int(np.sum(part == TRAIN))),
        ("test_users", int(np.sum(part == TEST))),
        ("dropped_users", int(np.sum(part == DROPPED))),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(name for name, _ in rows) + "\n")
        fh.write(",".join(str(value) for _, value in rows) + "\n")
