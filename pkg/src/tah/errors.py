"""Exception hierarchy shared by every tah module."""


class TahError(Exception):
    """Base class. The CLI maps these to exit code 1."""


class ConfigError(TahError, ValueError):
    pass


class DimensionError(TahError, ValueError):
    pass


class NumericError(TahError, ArithmeticError):
    pass


class ContractError(TahError):
    """A precondition of an operation was violated by the caller."""


class CacheConsistencyError(ContractError):
    pass


class AlignmentError(TahError):
    """Labels and corpus do not describe the same tokens."""


class TokenizationError(TahError, ValueError):
    pass


class EmptyCorpusError(TahError):
    pass


class DegenerateClassError(TahError):
    pass


class FitError(TahError):
    pass


class DependencyError(TahError):
    """A pipeline stage was asked to run before its inputs exist."""


class DivergenceError(TahError):
    pass


class CheckpointError(TahError):
    pass
