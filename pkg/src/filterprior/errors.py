"""Exception hierarchy shared across the toolkit.

Each class carries the process exit code the CLI maps it to:
2 input/format problems, 3 empty results, 4 size constraints,
5 internal invariant violations.
"""


class ToolkitError(Exception):
    exit_code = 2


class FormatError(ToolkitError):
    """File does not conform to the expected on-disk layout."""


class TruncationError(FormatError):
    """File ends before the declared payload is complete."""


class ValidationError(ToolkitError):
    """Structurally well-formed input violates a semantic invariant."""


class ConfigError(ToolkitError):
    """Bad or incomplete run configuration."""


class EmptyResultError(ToolkitError):
    """An operation produced or received no usable items."""

    exit_code = 3


class EmptyBankError(EmptyResultError):
    """An operation produced or received a filter bank with no filters."""


class SizeConstraintError(ToolkitError):
    """An input is too small for the requested operation (e.g. N < K)."""

    exit_code = 4


class InvariantViolation(ToolkitError):
    """An internal runtime invariant failed; indicates a bug, not bad input."""

    exit_code = 5


class MonotonicityError(InvariantViolation):
    """An objective that must be monotone across iterations was not."""


class TrainingDiverged(ToolkitError):
    """Training produced a non-finite loss and was aborted."""

    exit_code = 5
