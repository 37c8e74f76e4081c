"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 2 (argparse),
DataError exits 3, NonFiniteError exits 4.
"""


class DiagfuseError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(DiagfuseError, ValueError):
    """Operation received tensors with incompatible dimensions."""

    def __init__(self, op_kind: str, *dims):
        self.op_kind = op_kind
        self.dims = dims
        super().__init__(f"{op_kind}: incompatible dims {dims}")


class NonFiniteError(DiagfuseError, ArithmeticError):
    """A primitive produced NaN or infinity (diverged optimization)."""


class DataError(DiagfuseError, ValueError):
    """Missing, malformed, or unreachable data."""
