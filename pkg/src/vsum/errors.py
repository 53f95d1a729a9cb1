"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, DataError -> 3,
NumericError -> 4.
"""


class VsumError(Exception):
    """Base class for all package errors."""


class ShapeError(VsumError):
    """Dimension mismatch between operands; message names both shapes."""


class NumericError(VsumError):
    """Non-finite values where finite ones are required (NaN loss, NaN grads)."""


class DataError(VsumError):
    """Broken dataset inputs: manifests, annotations, feature files."""


class FormatError(DataError):
    """Malformed binary feature file or checkpoint; message carries a byte offset."""


class UsageError(VsumError):
    """API called in a way its contract forbids (e.g. labels requested but absent)."""
