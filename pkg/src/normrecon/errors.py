"""Exception hierarchy. The CLI maps these onto exit codes."""


class ReconError(Exception):
    """Base class for all library errors."""

    exit_code = 3


class ParameterError(ReconError, ValueError):
    exit_code = 2


class DegenerateError(ReconError):
    """Geometrically degenerate input (parallel rays, collinear points, ...).

    ``condition`` carries the conditioning number when one is available.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class BehindCameraError(ReconError, ValueError):
    pass


class CacheInvalidError(ReconError):
    pass


class NoOverlapError(ReconError):
    pass


class NumericalError(ReconError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RemeshCorruptionError(ReconError):
    pass
