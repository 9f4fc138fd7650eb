"""
Error hierarchy shared by every module of the app.

Each class carries the process exit code the management commands
report when the error escapes a command.
"""


class AeganError(Exception):
    exit_code = 1


class ConfigurationError(AeganError):
    exit_code = 2


class SchemaError(ConfigurationError):

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__('{}: {}'.format(path, message))


class ArgumentError(AeganError, ValueError):
    exit_code = 2


class SpecError(ArgumentError):
    pass


class GeometryError(ArgumentError):
    pass


class DataError(AeganError):
    exit_code = 3


class VolumeValidationError(DataError):

    def __init__(self, message: str, invalid_count: int = 0):
        self.invalid_count = invalid_count
        super().__init__(message)


class CoverageError(DataError):

    def __init__(self, holes: int):
        self.holes = holes
        super().__init__('Merged patches leave {} uncovered voxels.'.format(holes))


class ResolutionError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(AeganError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(NumericError):
    pass


class DegenerateStatisticError(NumericError):
    pass
