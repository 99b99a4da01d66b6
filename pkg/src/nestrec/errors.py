"""Exception taxonomy. The CLI maps these onto exit codes."""


class NestrecError(Exception):
    """Base class for package errors."""


class UsageError(NestrecError):
    """Bad command-line arguments or config values (exit code 1)."""


class DataError(NestrecError):
    """Input data that cannot be processed (exit code 2)."""


class FormatError(DataError):
    """A binary or text artifact violating its declared layout (exit code 2)."""


class DivergenceError(NestrecError):
    """Training produced a non-finite loss or gradient."""
