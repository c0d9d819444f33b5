"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class XRGenError(Exception):
    pass


class ShapeError(XRGenError):
    """Operands with incompatible shapes were passed to a tensor op."""


class NumericError(XRGenError):
    """NaN or Inf appeared in a forward or backward pass."""


class DataError(XRGenError):
    """Malformed or inconsistent input data (manifests, vocab files,
    feature files, checkpoints, ...)."""
