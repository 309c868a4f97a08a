"""Synthetic corpora with planted user clusters, for calibration and
learning-signal tests.

Each user belongs to a latent cluster drawn from a mixture; their sequence is
a Markov walk under the cluster's transition matrix with a small rate of
uniform substitutions in the emitted items (the walk itself is not
perturbed).  Timestamps encode generation order, so preprocessing assigns
dense user ids in generation order and the ground-truth labels line up.
Labels are returned for diagnostics only and never feed the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, Interaction, preprocess
from .errors import ContractError, GenerationSpecError


@dataclass
class PlantedSpec:
    users: int
    item_count: int
    mixture: tuple            # cluster weights, sum to 1
    item_subsets: list        # per cluster: global item ids
    transitions: list         # per cluster: row-stochastic matrix over its subset
    length_range: tuple = (5, 15)
    noise: float = 0.05
    seed: int = 0

    def validate(self):
        m = len(self.mixture)
        if m < 1 or len(self.item_subsets) != m or len(self.transitions) != m:
            raise GenerationSpecError("mixture, item_subsets and transitions must align")
        if self.users < 1:
            raise GenerationSpecError(f"users must be >= 1, got {self.users}")
        weights = np.asarray(self.mixture, dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise GenerationSpecError("mixture weights must be positive and sum to 1")
        if not 0.0 <= self.noise < 1.0:
            raise GenerationSpecError(f"noise must be in [0, 1), got {self.noise}")
        lo, hi = self.length_range
        if not 3 <= lo <= hi:
            raise GenerationSpecError(f"bad length range {self.length_range}")
        for j, (subset, matrix) in enumerate(zip(self.item_subsets, self.transitions)):
            t = np.asarray(matrix, dtype=np.float64)
            s = len(subset)
            if s < 1 or t.shape != (s, s):
                raise GenerationSpecError(f"cluster {j}: matrix shape {t.shape} != ({s}, {s})")
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
                raise GenerationSpecError(f"cluster {j}: transition rows must be stochastic")
            if any(not 0 <= g < self.item_count for g in subset):
                raise GenerationSpecError(f"cluster {j}: item ids outside vocabulary")


def generate_interactions(spec: PlantedSpec) -> tuple[list, np.ndarray]:
    """Raw interaction records plus the per-user ground-truth cluster ids."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9E4]))
    lo, hi = spec.length_range
    width = len(str(max(spec.users, spec.item_count))) + 1
    records: list[Interaction] = []
    labels = np.empty(spec.users, dtype=np.int64)
    weights = np.asarray(spec.mixture, dtype=np.float64)
    for u in range(spec.users):
        cluster = int(rng.choice(len(weights), p=weights))
        labels[u] = cluster
        subset = spec.item_subsets[cluster]
        matrix = np.asarray(spec.transitions[cluster], dtype=np.float64)
        length = int(rng.integers(lo, hi + 1))
        state = int(rng.integers(len(subset)))
        for pos in range(length):
            emitted = subset[state]
            if spec.noise and rng.random() < spec.noise:
                emitted = int(rng.integers(spec.item_count))
            records.append(
                Interaction(f"u{u:0{width}d}", f"i{emitted:0{width}d}", u * (hi + 1) + pos)
            )
            state = int(rng.choice(len(subset), p=matrix[state]))
    return records, labels


def generate(spec: PlantedSpec, k_shots: int = 3) -> tuple[Corpus, np.ndarray]:
    """Corpus plus ground-truth labels aligned to dense user ids."""
    records, labels = generate_interactions(spec)
    corpus = preprocess(records, k_shots)
    aligned = np.empty(corpus.user_count, dtype=np.int64)
    for dense, ext in enumerate(corpus.user_ids):
        aligned[dense] = labels[int(ext[1:])]
    return corpus, aligned


def write_synthetic_csv(spec: PlantedSpec, data_path, labels_path=None) -> None:
    """Emit the generated interactions in the ingestible CSV format, with an
    optional ground-truth label sidecar."""
    records, labels = generate_interactions(spec)
    with open(data_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.user},{rec.item},{rec.timestamp}\n")
    if labels_path is not None:
        width = len(str(max(spec.users, spec.item_count))) + 1
        with open(labels_path, "w", encoding="utf-8") as fh:
            fh.write("user,cluster\n")
            for u, label in enumerate(labels):
                fh.write(f"u{u:0{width}d},{int(label)}\n")


# ---------------------------------------------------------------------------
# ready-made specs


def _cycle(size: int) -> np.ndarray:
    t = np.zeros((size, size))
    for i in range(size):
        t[i, (i + 1) % size] = 1.0
    return t


def default_spec(seed: int = 0) -> PlantedSpec:
    """Desk-scale corpus: two major and two minor clusters over disjoint
    15-item vocabulary slices, cyclic transitions, light noise."""
    subsets = [list(range(j * 15, (j + 1) * 15)) for j in range(4)]
    return PlantedSpec(
        users=400,
        item_count=60,
        mixture=(0.4, 0.4, 0.1, 0.1),
        item_subsets=subsets,
        transitions=[_cycle(15) for _ in range(4)],
        length_range=(5, 15),
        noise=0.05,
        seed=seed,
    )


def contrast_spec(seed: int = 0, users: int = 300, items: int = 120,
                  minor_weight: float = 0.2, noise: float = 0.02) -> PlantedSpec:
    """Major/minor mix on a shared vocabulary with opposite walk directions.

    Both clusters traverse the same item cycle, the minor one backwards, so
    an item's continuation depends on the user's cluster; this isolates the
    value of user-level routing.
    """
    full = list(range(items))
    forward = _cycle(items)
    return PlantedSpec(
        users=users,
        item_count=items,
        mixture=(1.0 - minor_weight, minor_weight),
        item_subsets=[full, list(full)],
        transitions=[forward, forward.T.copy()],
        length_range=(5, 15),
        noise=noise,
        seed=seed,
    )


def cluster_agreement(assignments, labels) -> float:
    """Chance-adjusted agreement between two labelings (permutation
    invariant); 1 for identical partitions, about 0 for random ones."""
    a = np.asarray(assignments, dtype=np.int64)
    b = np.asarray(labels, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ContractError("cluster_agreement: need two aligned non-empty label vectors")
    n = a.size
    a_vals, a_inv = np.unique(a, return_inverse=True)
    b_vals, b_inv = np.unique(b, return_inverse=True)
    contingency = np.zeros((a_vals.size, b_vals.size), dtype=np.int64)
    np.add.at(contingency, (a_inv, b_inv), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1.0) / 2.0))

    sum_ij = pairs(contingency)
    sum_a = pairs(contingency.sum(axis=1))
    sum_b = pairs(contingency.sum(axis=0))
    total = n * (n - 1.0) / 2.0
    expected = sum_a * sum_b / total if total else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))
