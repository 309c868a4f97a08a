"""Run configuration: a single validated dataclass shared by library and CLI."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

THREADS_ENV_VAR = "CLUSTERSEQ_THREADS"


@dataclass
class RunConfig:
    """Hyperparameters and switches for preprocessing, training and evaluation.

    Field names spell out what each knob does; single letters used in
    discussion map as: K=k_shots, D=embed_dim, M=num_clusters, B=batch_size.
    """

    seed: int = 0
    k_shots: int = 3
    embed_dim: int = 16
    num_clusters: int = 4
    batch_size: int = 64
    inner_lr: float = 0.05
    meta_lr: float = 0.005
    inner_steps: int = 1
    margin: float = 1.0
    epochs: int = 200
    graph_neighbors: int = 5
    item_overlap_weight: float = 0.1
    gcn_mix: float = 0.5
    min_seq_len: int = 0  # 0 means "use k_shots"
    test_fraction: float = 0.1
    eval_negatives: int = 100
    use_clustering: bool = True
    # Fidelity switches for degraded textbook variants; defaults are the
    # corrected forms used everywhere in this package.
    decoder_output_softmax: bool = True
    decoder_hidden_from_input: bool = True
    sharpen_linear_denominator: bool = False
    support_start_index: int = 2
    checkpoint_every: int = 0  # 0 means final checkpoint only
    max_threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.k_shots < 3:
            raise ConfigurationError(f"k_shots must be >= 3, got {self.k_shots}")
        if self.embed_dim < 2:
            raise ConfigurationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.num_clusters < 2:
            raise ConfigurationError(f"num_clusters must be >= 2, got {self.num_clusters}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.inner_lr <= 0 or self.meta_lr < 0:
            raise ConfigurationError("inner_lr must be > 0 and meta_lr >= 0")
        if self.inner_steps < 1:
            raise ConfigurationError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.margin <= 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.graph_neighbors < 1:
            raise ConfigurationError(f"graph_neighbors must be >= 1, got {self.graph_neighbors}")
        if not 0.0 <= self.gcn_mix <= 1.0:
            raise ConfigurationError(f"gcn_mix must be in [0, 1], got {self.gcn_mix}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.eval_negatives < 1:
            raise ConfigurationError(f"eval_negatives must be >= 1, got {self.eval_negatives}")
        if self.support_start_index not in (2, 3):
            raise ConfigurationError(
                f"support_start_index must be 2 or 3, got {self.support_start_index}"
            )
        if self.min_seq_len and self.min_seq_len < self.k_shots:
            raise ConfigurationError(
                f"min_seq_len ({self.min_seq_len}) must be >= k_shots ({self.k_shots})"
            )
        if self.max_threads < 1:
            raise ConfigurationError(f"max_threads must be >= 1, got {self.max_threads}")

    @property
    def effective_min_seq_len(self) -> int:
        return self.min_seq_len if self.min_seq_len else self.k_shots

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_dict(data: dict) -> RunConfig:
    """Build a config from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"config root must be an object, got {type(data).__name__}")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    """Load a JSON config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def thread_cap_from_env(default: int = 1) -> int:
    """Read the parallelism cap from the environment; bounds any worker pools."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
    return value
