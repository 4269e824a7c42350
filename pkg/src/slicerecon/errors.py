"""Exception hierarchy shared by all modules.

Each error carries an ``exit_code`` used by the command line front end:
2 for configuration/precondition problems, 3 for numerical failures and
4 for I/O problems.
"""


class ReconError(Exception):
    exit_code = 2


class ConfigError(ReconError):
    pass


class ShapeError(ReconError, ValueError):
    pass


class DomainError(ReconError, ValueError):
    pass


class EmptyMask(ReconError, ValueError):
    pass


class EmptyInput(ReconError, ValueError):
    pass


class EmptyVolume(ReconError, ValueError):
    pass


class InvalidConfig(ConfigError, ValueError):
    pass


class InvalidTransform(ReconError, ValueError):
    pass


class OutOfBounds(ReconError, ValueError):
    pass


class InsufficientSlices(ReconError, ValueError):
    pass


class InsufficientGrid(ReconError, ValueError):
    pass


class NoPeaks(ReconError, ValueError):
    pass


class UncalibratedStack(ReconError, ValueError):
    pass


class UndefinedCorrelation(ReconError, ValueError):
    pass


class InvalidParams(ReconError, ValueError):
    pass


class NumericalDivergence(ReconError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class SliceError(ReconError):
    """Wraps a per-slice failure with the index of the offending slice."""

    def __init__(self, index, cause):
        super().__init__(f"slice {index}: {cause}")
        self.index = index
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
