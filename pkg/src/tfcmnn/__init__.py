"""Time-frequency convolutional maxout networks (TFCMNN) for frame-level
phone classification, with an LHCB filter-bank front-end.

Everything is plain float64 numpy, hand-derived backward passes, and a
seeded-PRNG-only training loop, so any run is reproducible bit for bit.
"""

from tfcmnn.errors import (
    DataFormatError,
    DivergenceError,
    DomainError,
    ShapeError,
)

__all__ = [
    "DataFormatError",
    "DivergenceError",
    "DomainError",
    "ShapeError",
]

__version__ = "0.1.0"
