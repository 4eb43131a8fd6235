"""Exception hierarchy shared by every module.

The CLI maps each class to its own exit code, so callers can tell a bad
flag from a corrupt file from a diverged run without parsing messages.
"""


class ConcreteDropoutError(Exception):
    exit_code = 1


class DimensionError(ConcreteDropoutError, ValueError):
    exit_code = 2


class ArgumentError(ConcreteDropoutError, ValueError):
    exit_code = 3


class ConfigurationError(ConcreteDropoutError, ValueError):
    exit_code = 4


class DataError(ConcreteDropoutError, ValueError):
    exit_code = 5


class FormatError(DataError):
    exit_code = 6


class StateError(ConcreteDropoutError, RuntimeError):
    exit_code = 7


class NonFiniteError(ConcreteDropoutError, FloatingPointError):
    exit_code = 8


class TrainingError(ConcreteDropoutError, RuntimeError):
    exit_code = 9

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DegeneratePosteriorError(ConcreteDropoutError, ValueError):
    exit_code = 10


class DegenerateIntervalError(ConcreteDropoutError, ValueError):
    exit_code = 11
