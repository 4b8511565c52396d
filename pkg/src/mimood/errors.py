"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/format problems with 3 and numeric failures with 4.
"""


class MimError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(MimError, ValueError):
    exit_code = 2


class ArchitectureError(ConfigError):
    """Layer chain whose shapes do not compose."""


class ContractError(MimError, RuntimeError):
    """An operation was called outside its documented preconditions."""

    exit_code = 2


class DimensionError(MimError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""

    exit_code = 4


class DomainError(MimError, ValueError):
    """Argument outside the mathematical domain of an operation (e.g. log of 0)."""

    exit_code = 4


class NumericError(MimError, ArithmeticError):
    exit_code = 4


class DataError(MimError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """A file does not follow its binary layout."""


class TruncationError(FormatError):
    pass
