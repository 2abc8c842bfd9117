"""Exception hierarchy shared by all modules."""


class HarError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(HarError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(HarError, ValueError):
    """A configuration field violates its contract.

    ``field`` names the offending setting so callers can report it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class LabelError(HarError, ValueError):
    """A class index is outside ``[0, K)``."""


class DataError(HarError, ValueError):
    """Input data could not be parsed or is unusable."""


class ProtocolError(HarError, ValueError):
    """The evaluation protocol cannot be applied to the given data."""


class DivergenceError(HarError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class NonFiniteError(HarError, ArithmeticError):
    """Debug health check found NaN or Inf in an operation result."""
