"""Exception hierarchy shared by the library and the command line."""


class StaicError(Exception):
    """Base class for all library errors."""


class FormatError(StaicError):
    """A file does not follow the expected layout (bad magic, short header)."""


class SizeError(StaicError):
    """Dimensions are invalid, inconsistent, or too large."""


class DataError(StaicError):
    """Sample values are unusable (NaN, Inf, wrong sign)."""


class ConfigError(StaicError):
    """A configuration file or parameter set is invalid."""


class DivergenceError(StaicError):
    """An iterative solver produced a non-finite iterate."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")
