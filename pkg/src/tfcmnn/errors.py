"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data/format
problems -> 2, numeric divergence -> 3.
"""


class ShapeError(ValueError):
    """Tensor extents do not line up for the requested operation."""


class DomainError(ValueError):
    """A scalar argument is outside its valid domain (e.g. p not in [0,1])."""


class DataFormatError(ValueError):
    """A file or dataset violates its on-disk or in-memory contract."""


class DivergenceError(ArithmeticError):
    """A non-finite value appeared where training expected a finite one."""
