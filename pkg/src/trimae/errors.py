"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class TrimaeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(TrimaeError):
    """Invalid configuration: bad schema, unknown keys, out-of-range values."""

    exit_code = 2


class DataError(TrimaeError):
    """Invalid or missing data: paths, manifests, labels, shapes."""

    exit_code = 3


class NumericError(TrimaeError):
    """Numerical failure during training or evaluation (NaN/Inf)."""

    exit_code = 4


class CheckpointError(TrimaeError):
    """Checkpoint missing, unreadable, or incompatible with the model config."""

    exit_code = 5
