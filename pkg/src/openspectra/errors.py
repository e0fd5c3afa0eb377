"""Exception types shared across the package."""


class OpenSpectraError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatchError(OpenSpectraError, ValueError):
    """Operands of a tensor primitive have incompatible shapes."""


class ParseError(OpenSpectraError, ValueError):
    """A spectrum or config file could not be parsed.

    Carries the 1-based row index of the offending line when known.
    """

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class DatasetError(OpenSpectraError, ValueError):
    """A dataset, manifest, or split violates its contract."""


class ConfigError(OpenSpectraError, ValueError):
    """A run configuration is missing, inconsistent, or unreadable."""


class DivergenceError(OpenSpectraError, RuntimeError):
    """Training produced a non-finite loss."""
