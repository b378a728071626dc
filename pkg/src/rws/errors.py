"""Exception hierarchy shared by all modules."""


class RWSError(Exception):
    """Base class for every error raised by this package."""


class InvalidBandwidthError(RWSError, ValueError):
    pass


class InvalidCountError(RWSError, ValueError):
    pass


class NoValidBandwidthError(RWSError, ValueError):
    pass


class DomainError(RWSError, ValueError):
    pass


class InvalidBatchError(RWSError, ValueError):
    pass


class EmptyEstimateError(RWSError, ValueError):
    pass


class InsufficientDataError(RWSError, ValueError):
    pass


class ConfigError(RWSError, ValueError):
    pass


class SingularSystemError(RWSError, ArithmeticError):
    def __init__(self, message, smallest_eigenvalue):
        super().__init__(f"{message} (smallest eigenvalue {smallest_eigenvalue:.3e})")
        self.smallest_eigenvalue = smallest_eigenvalue


class CorruptionError(RWSError):
    pass


class VersionError(RWSError):
    pass


class ParseError(RWSError, ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DataError(RWSError, ValueError):
    def __init__(self, message, line=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
