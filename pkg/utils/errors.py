"""Error types shared by every stage of the pipeline.

Each error carries a short stable ``code`` so the CLI can print a single
machine-parsable line. Most also derive from the matching builtin so callers
that only know about ``ValueError`` or ``IndexError`` still catch them.
"""


class MetaLoraError(Exception):
    """Base class for all pipeline failures."""

    code = "metalora"


class DimensionError(MetaLoraError, ValueError):
    """Tensor or grid shapes do not line up."""

    code = "dimension"


class ConfigError(MetaLoraError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""

    code = "config"


class TargetIndexError(MetaLoraError, IndexError):
    """A class index lies outside the logits' class range."""

    code = "target-index"


class ValidationError(MetaLoraError, ValueError):
    """An input violates a numeric precondition (e.g. rows not normalized)."""

    code = "validation"


class OptimizerStateError(MetaLoraError, RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""

    code = "optimizer-state"


class IncompatibleAdapterError(MetaLoraError, ValueError):
    """Adapters disagree on rank or attachment sites."""

    code = "incompatible-adapter"


class ArtifactError(MetaLoraError, IOError):
    """Base class for artifact container failures."""

    code = "artifact"


class BadMagicError(ArtifactError):
    code = "bad-magic"


class VersionMismatchError(ArtifactError):
    code = "version-mismatch"


class ChecksumError(ArtifactError):
    code = "checksum"


class TruncatedPayloadError(ArtifactError):
    code = "truncated"


class CountError(MetaLoraError, ValueError):
    """Not enough classes, images or examples for the requested split."""

    code = "count"


class DivergenceError(MetaLoraError, FloatingPointError):
    """An optimization produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class LabelError(MetaLoraError, ValueError):
    """A task's classes do not match the classification head."""

    code = "label"


class PipelineStateError(MetaLoraError, RuntimeError):
    """A stage was run before the artifacts it needs exist."""

    code = "state"


class TrainingFailedError(MetaLoraError, RuntimeError):
    """Teacher tuning never got past chance level."""

    code = "training-failed"


class UsageError(MetaLoraError):
    """Bad command line."""

    code = "usage"
