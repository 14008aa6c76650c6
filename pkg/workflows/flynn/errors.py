"""Exception hierarchy shared by the library, the federation runtime and the CLI.

Every class carries the process exit code the CLI uses when the error escapes
a subcommand.
"""


class FlyNNError(Exception):
    exit_code = 1


class ParameterError(FlyNNError, ValueError):
    exit_code = 2


class DimensionError(ParameterError):
    exit_code = 3


class ConfigError(FlyNNError, ValueError):
    exit_code = 2

    def __init__(self, message: str, field: str = None, line: int = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class DataError(FlyNNError, ValueError):
    exit_code = 3


class FetchError(DataError):
    pass


class ModelFormatError(DataError):
    pass


class TransportError(FlyNNError):
    exit_code = 4


class FederationAbort(TransportError):
    pass


class StragglerTimeout(TransportError):
    pass
