"""Exception hierarchy shared by all stages.

Each class carries the process exit code the command line maps it to.
"""


class ChromoforgeError(Exception):
    exit_code = 1


class InvalidInputError(ChromoforgeError, ValueError):
    """Input data violates a documented contract (shape, mask, degeneracy)."""

    exit_code = 2


class ConfigError(ChromoforgeError, ValueError):
    """Unknown keys, out-of-range parameters or geometry that cannot be set up."""

    exit_code = 2


class NumericalFault(ChromoforgeError, ArithmeticError):
    """NaN / instability detected during simulation or training."""

    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class MissingInputError(ChromoforgeError, FileNotFoundError):
    exit_code = 4
