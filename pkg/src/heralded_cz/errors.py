"""Exception types raised across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericError(RuntimeError):
    """A numerical result failed a consistency or finiteness check."""


class CalibrationError(ValueError):
    """An optical transform is not unitary within tolerance."""


class NetworkTopologyError(ValueError):
    """A netlist consumes, drops or duplicates a mode port."""

    def __init__(self, message: str, port: str | None = None):
        super().__init__(message)
        self.port = port


class NetlistSyntaxError(ValueError):
    """Malformed netlist text; carries 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ConfigError(ValueError):
    """Invalid run configuration.

    ``line``/``column`` are set for syntax problems, ``field`` for
    validation failures.
    """

    def __init__(self, message: str, line: int | None = None,
                 column: int | None = None, field: str | None = None):
        prefix = ""
        if line is not None:
            prefix = f"line {line}, column {column or 1}: "
        super().__init__(prefix + message)
        self.line = line
        self.column = column
        self.field = field
