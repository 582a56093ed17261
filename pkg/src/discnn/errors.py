"""Failure categories shared across the pipeline; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Malformed or contradictory configuration."""


class DataError(ValueError):
    """Dataset, manifest, or label-space problem."""


class NumericalError(RuntimeError):
    """Divergence or a failed numerical check."""
