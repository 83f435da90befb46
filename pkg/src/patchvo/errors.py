"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: input/usage problems (parse, validation,
configuration) exit with 2, runtime faults (solver, numerics) with 1.
"""


class PatchVOError(Exception):
    """Base class for all package errors."""


class ParseError(PatchVOError):
    """Malformed input record; carries the byte offset where decoding failed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(PatchVOError):
    """Input violates a documented range or format constraint."""


class OrderingError(PatchVOError):
    """Event timestamps are not monotonically non-decreasing."""


class ConfigError(PatchVOError):
    """Configuration field out of range or inconsistent with the data."""


class ShapeMismatchError(PatchVOError):
    """A stored tensor does not match the shape required by the configuration."""


class SequencingError(PatchVOError):
    """Graph frames must be appended with consecutive frame ids."""


class SolverError(PatchVOError):
    """Normal equations could not be solved even after damping."""


class NumericFault(PatchVOError):
    """A non-finite value appeared in an intermediate computation."""


class AssociationError(PatchVOError):
    """No trajectory pose pairs could be associated within the time tolerance."""
