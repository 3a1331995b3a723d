class GsfuseError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(GsfuseError, ValueError):
    pass


class NumericDegenerateError(GsfuseError, ArithmeticError):
    pass


class ConfigurationError(GsfuseError, ValueError):
    pass


class UsageError(GsfuseError, RuntimeError):
    """An API was called out of order or with mismatched inputs."""


class DimensionMismatchError(UsageError, ValueError):
    pass


class ParseError(GsfuseError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


class UnsupportedModelError(ParseError):
    pass


class NonFiniteLossError(GsfuseError, FloatingPointError):
    def __init__(self, iteration, term):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
