"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 1,
FormatError / CorruptionError / OSError -> 2.
"""


class SlidemilError(Exception):
    """Base class for all package errors."""


class ValidationError(SlidemilError):
    """Input violates a documented invariant (bad label, NaN, shape mismatch...)."""


class FormatError(SlidemilError):
    """File is not in the expected format (wrong magic, unparseable header)."""


class CorruptionError(FormatError):
    """File has the right format but a damaged payload (truncation, bad sizes)."""


class MetricUndefinedError(SlidemilError):
    """A metric's precondition does not hold on this data (e.g. single-class AUC)."""
