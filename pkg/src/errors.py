"""
Exceptions raised across regdit
"""


class RegditError(Exception):
    """Root of every error raised by the package."""


class DimensionError(RegditError, ValueError):
    """Operand shapes do not agree."""


class ContractError(RegditError, ValueError):
    """A documented precondition was violated by the caller."""


class GraphError(ContractError):
    """The autodiff graph was used after it was consumed."""


class ParseError(RegditError, ValueError):
    """
    Malformed input file.

    line int: 1-based line number of the offending record, when known
    """

    def __init__(self, message: str, line: int = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(RegditError, ValueError):
    """Run configuration is invalid."""


class TransportError(RegditError, ConnectionError):
    """The external scoring endpoint could not be reached."""

    retryable = True


class ProtocolError(RegditError, ValueError):
    """The external scoring endpoint answered with a malformed frame."""


class NumericalError(RegditError, ArithmeticError):
    """A loss or gradient became non-finite."""
