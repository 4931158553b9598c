"""Exception hierarchy shared by every subsystem."""


class LabError(Exception):
    """Base class for all errors raised by ctxlab."""


class DimensionError(LabError, ValueError):
    pass


class ContractError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    pass


class NumericError(LabError, ArithmeticError):
    pass


class DegenerateRowError(NumericError):
    """A softmax row had every entry masked."""


class FormatError(LabError, ValueError):
    pass


class LengthError(LabError, ValueError):
    pass


class DataError(LabError, ValueError):
    pass


class RejectedSampleError(DataError):
    """An instruction sample whose target alone exceeds the context budget."""


class StateError(LabError, RuntimeError):
    pass


class PositionError(LabError, IndexError):
    pass
