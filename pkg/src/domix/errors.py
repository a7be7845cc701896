"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible with an operation."""


class ContractError(RuntimeError):
    """A documented precondition or invariant was violated by the caller."""


class BundleError(RuntimeError):
    """An adapter bundle file is malformed, truncated, or mismatched."""
