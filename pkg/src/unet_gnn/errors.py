"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class UGNNError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(UGNNError, ValueError):
    exit_code = 2
    category = "config"


class ShapeError(UGNNError, ValueError):
    exit_code = 2
    category = "shape"


class DataError(UGNNError, ValueError):
    exit_code = 3
    category = "data"


class FormatError(UGNNError, ValueError):
    exit_code = 4
    category = "format"


class NumericalError(UGNNError, ArithmeticError):
    exit_code = 5
    category = "numerical"


class BackwardError(UGNNError, RuntimeError):
    exit_code = 6
    category = "autodiff"
