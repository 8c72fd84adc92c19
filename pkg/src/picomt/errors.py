"""Exception hierarchy shared across the toolkit.

Every error that can reach the command line carries a short machine-parsable
category so the CLI can emit a single `error: <category>: <message>` line.
"""


class PicomtError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ConfigError(PicomtError):
    """Bad configuration: unknown keys, missing paths, incompatible settings."""

    category = "config"


class DataError(PicomtError):
    """Malformed or inconsistent input data."""

    category = "data"


class IntegrityError(PicomtError):
    """Corrupt, truncated, or mismatched checkpoint/serialized files."""

    category = "integrity"


class DivergenceError(PicomtError):
    """Training produced NaN/Inf loss or gradients."""

    category = "divergence"
