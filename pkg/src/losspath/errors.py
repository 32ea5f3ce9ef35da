"""Error types shared across the package.

Each error maps to one CLI exit code: configuration problems exit with 2,
divergence with 3, and I/O or format problems with 4.
"""


class LpkError(Exception):
    exit_code = 1


class ConfigError(LpkError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class RankError(ConfigError):
    pass


class ResourceError(ConfigError):
    pass


class NumericError(LpkError):
    exit_code = 3


class DivergenceError(NumericError):
    """Raised when parameters or the loss stop being finite.

    Carries the step at which it happened and whatever was recorded so far.
    """

    def __init__(self, msg, step=None, partial=None):
        super().__init__(msg)
        self.step = step
        self.partial = partial


class FormatError(LpkError):
    exit_code = 4
