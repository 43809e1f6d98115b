"""Exception types shared across the package."""


class PhaseganError(Exception):
    """Base class for all package errors."""


class ShapeError(PhaseganError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(PhaseganError):
    """A numeric-domain violation (log of non-positive, division by zero, NaN)."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (first offending index: {index})"
        super().__init__(message)
        self.index = index


class ContractError(PhaseganError):
    """A call violated an operation precondition."""


class ConfigError(PhaseganError):
    """Invalid configuration value or unknown key."""


class ScheduleError(ConfigError):
    """A schedule spec violates its own invariants (e.g. s*y >= n)."""


class FormatError(PhaseganError):
    """A file could not be parsed; carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingAborted(NumericError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""
