"""Exception hierarchy. CLI exit codes hang off these classes."""


class STNetError(Exception):
    exit_code = 1


class ConfigError(STNetError, ValueError):
    exit_code = 1


class DataError(STNetError, ValueError):
    exit_code = 2


class ShapeError(DataError):
    pass


class CoregistrationError(ShapeError):
    pass


class IngestionError(DataError):
    pass


class ResolutionError(ShapeError):
    pass


class NumericalError(STNetError, ArithmeticError):
    exit_code = 3
