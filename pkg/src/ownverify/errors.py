"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not agree with what an operation requires."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(ValueError):
    """A file or wire message could not be decoded."""


class TrainingDiverged(ArithmeticError):
    pass


class OracleError(RuntimeError):
    """The oracle answered, but with an error response."""


class OracleUnreachable(ConnectionError):
    """The oracle could not be reached after all retries."""
