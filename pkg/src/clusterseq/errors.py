"""Exception taxonomy shared across the package.

Every error carries a short machine-readable ``code`` so the command line
layer can emit a single parseable line and exit nonzero.
"""


class ClusterSeqError(Exception):
    """Base class for all package errors."""

    code = "error"


class DimensionError(ClusterSeqError):
    """Operand shapes do not line up."""

    code = "dimension"


class DomainError(ClusterSeqError):
    """Value outside the mathematical domain of an operation."""

    code = "domain"


class ConfigurationError(ClusterSeqError):
    """Invalid or inconsistent configuration."""

    code = "config"


class ContractError(ClusterSeqError):
    """An internal precondition was violated by the caller."""

    code = "contract"


class IndexLookupError(ClusterSeqError):
    """Row index outside an embedding table."""

    code = "index"


class EvaluationError(ClusterSeqError):
    """Numerical evaluation produced unusable values."""

    code = "evaluation"


class IngestIOError(ClusterSeqError):
    """Source could not be read."""

    code = "io"


class FormatError(ClusterSeqError):
    """Malformed file contents."""

    code = "format"


class SplitError(ClusterSeqError):
    """User partitioning produced an unusable split."""

    code = "split"


class SamplingError(ClusterSeqError):
    """Random sampling could not satisfy its contract."""

    code = "sampling"


class EpisodeError(ClusterSeqError):
    """A task episode could not be formed."""

    code = "episode"


class TrainingError(ClusterSeqError):
    """Training aborted."""

    code = "training"


class CompatibilityError(ClusterSeqError):
    """Checkpoint and corpus or config disagree."""

    code = "compatibility"


class GenerationSpecError(ClusterSeqError):
    """Invalid synthetic corpus specification."""

    code = "genspec"
