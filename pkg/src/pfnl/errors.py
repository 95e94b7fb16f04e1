"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 2,
file/format problems exit 3, numerical failures exit 4.
"""


class PfnlError(Exception):
    """Base class for all package errors."""


class ConfigError(PfnlError):
    """Invalid configuration value or unparseable config text."""


class DimensionError(PfnlError):
    """Operands with incompatible shapes."""


class DegenerateInputError(PfnlError):
    """Input outside an operation's domain (zero norm, empty set, ...)."""


class BankFormatError(PfnlError):
    """Malformed bank file. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BankDataError(PfnlError):
    """Structurally valid bank with invalid payload (non-finite entries, ...)."""


class CheckpointFormatError(PfnlError):
    """Malformed checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SamplingError(PfnlError):
    """Episode request that the bank cannot satisfy."""


class MiningError(PfnlError):
    """Hard-negative request that the gallery cannot satisfy."""


class NumericalError(PfnlError):
    """Non-finite loss or gradient; aborts the training step."""
