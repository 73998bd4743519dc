"""Shared exception types, mapped onto CLI exit codes."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad shapes, out-of-range hyperparameters,
    unknown config keys. CLI exit code 2."""


class MissingArtifactError(RuntimeError):
    """A pipeline stage ran before its predecessor, or a predecessor's
    outputs are stale. CLI exit code 3."""


class DataError(ValueError):
    """Malformed or degenerate data: empty notes, corrupt token ids,
    referential-integrity violations, single-class folds. CLI exit code 4."""
