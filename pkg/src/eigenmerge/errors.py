"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EigenmergeError(Exception):
    exit_code = 1


class UsageError(EigenmergeError):
    exit_code = 2


class DataError(EigenmergeError, ValueError):
    """Inputs are inconsistent: missing tensors, shape or fingerprint mismatches."""

    exit_code = 3


class FormatError(DataError):
    """A file does not conform to its container format."""


class NumericError(EigenmergeError, ArithmeticError):
    """Non-finite values or a degenerate factorization."""

    exit_code = 4
