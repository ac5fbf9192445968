"""Exception types shared across the package.

Plain ``ValueError`` is used for invalid arguments; the classes below mark
the cases callers (mainly the CLI) need to tell apart.
"""


class ContractError(RuntimeError):
    """An operation was called in a state its contract does not allow."""


class ConfigError(ValueError):
    """Inconsistent training or run configuration."""


class ParseError(ValueError):
    """Malformed data file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""
