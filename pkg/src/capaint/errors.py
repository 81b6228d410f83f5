"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration/usage problems
exit 2, numeric or training failures exit 3, data-integrity violations
exit 4.
"""


class CaPaintError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CaPaintError):
    """Invalid configuration value, detected before any side effect."""


class UsageError(CaPaintError):
    """API misuse: wrong call order, unknown mode, empty input group."""


class DimensionError(CaPaintError):
    """Tensor shape incompatible with the declared geometry."""


class DataError(CaPaintError):
    """A sequence or array violates a data precondition (e.g. too short)."""


class DataIntegrityError(CaPaintError):
    """On-disk artifact inconsistent with its manifest or header."""


class TrainingError(CaPaintError):
    """Training diverged or produced a non-finite loss."""


class NumericError(CaPaintError):
    """Non-finite values encountered during numeric computation."""
