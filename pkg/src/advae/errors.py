"""Exception hierarchy. Each class carries the CLI exit code it maps to
(0 success, 1 validation, 2 runtime, 3 I/O)."""


class AdvaeError(Exception):
    exit_code = 2


class ConfigurationError(AdvaeError):
    """Invalid configuration value or schema violation."""

    exit_code = 1


class DomainError(AdvaeError):
    """Reference to an unknown topic, attribute, or expression."""

    exit_code = 1


class ProtocolError(AdvaeError):
    """Evaluation protocol precondition violated (e.g. overlapping splits)."""

    exit_code = 1


class ShapeError(AdvaeError):
    """Tensor or vector dimensions do not match the model configuration."""


class NumericError(AdvaeError):
    """Non-finite value where a finite one is required."""


class TrainingError(AdvaeError):
    """Training diverged or its preconditions were not met."""


class DatasetError(AdvaeError):
    """Dataset file could not be written, read, or decoded."""

    exit_code = 3


class CheckpointFormatError(AdvaeError):
    """Checkpoint bytes are corrupt, truncated, or fail their checksum."""

    exit_code = 3


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint was written by an incompatible format version."""

    exit_code = 3


class ArtifactError(AdvaeError):
    """Pipeline artifact missing or with mismatched provenance."""

    exit_code = 3
