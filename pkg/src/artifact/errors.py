"""Exception classes shared across modules.

Each class maps onto one CLI exit code.
"""


class ArtifactError(Exception):
    exit_code = 1


class ConfigError(ArtifactError):
    exit_code = 2


class MeshError(ArtifactError):
    exit_code = 3


class ParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TaggingError(MeshError):
    pass


class GeometryError(MeshError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


class SolverError(ArtifactError):
    exit_code = 4

    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        super().__init__(message)


class NumericError(SolverError):
    pass


class FlowError(SolverError):
    pass


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class CheckFailed(ArtifactError):
    exit_code = 5
