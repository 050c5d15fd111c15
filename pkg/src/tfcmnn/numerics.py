"""Dense-tensor substrate, seeded randomness, and the finite-difference
gradient oracle.

Tensors are float64 numpy arrays of rank <= 3. `as_tensor` is the checked
constructor: it rejects NaN/Inf so silent divergence turns into a
diagnosable error. The PRNG is numpy's PCG64 behind a thin wrapper; the
algorithm is fixed here and must not change between releases, since
checkpoint reproducibility depends on the exact stream.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from tfcmnn.errors import DomainError, ShapeError

MAX_RANK = 3


def as_tensor(values, rank: int | None = None) -> np.ndarray:
    """Checked tensor constructor: float64, rank <= 3, all entries finite."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


def check_finite(arr: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite {what}")
    return arr


class SeededRng:
    """Deterministic PRNG with a fixed, documented algorithm.

    Algorithm: numpy PCG64 seeded through SeedSequence. Identical seed ->
    identical stream on every platform. Child streams derived with
    `child(tag)` are independent and equally reproducible.
    """

    def __init__(self, seed: int | Sequence[int]):
        if isinstance(seed, int):
            seed = [seed]
        self._entropy = list(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def child(self, *tags: int) -> "SeededRng":
        """Independent stream keyed by this rng's seed plus integer tags."""
        return SeededRng(self._entropy + list(tags))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, scale: float, size) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli_mask(self, n: int, p: float) -> np.ndarray:
        """n independent {0,1} draws, each 1 with probability p.

        Advances the state by exactly n uniform draws.
        """
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probability p={p} outside [0, 1]")
        return (self._gen.random(n) < p).astype(np.float64)


def matmul(a, b) -> np.ndarray:
    """Rank-2 matrix product with a fixed summation order.

    Accumulates over the inner dimension in index order with no
    reassociation, so the result is bit-identical to a naive triple loop.
    Layer code uses BLAS for speed; this is the checked reference product.
    """
    a = as_tensor(a, rank=2)
    b = as_tensor(b, rank=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for j in range(a.shape[1]):
        out += a[:, j, np.newaxis] * b[j, np.newaxis, :]
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by
    coordinate: (f(x + h e_i) - f(x - h e_i)) / (2 h).

    This is the independent oracle every analytic backward pass is checked
    against; it must stay ignorant of how those passes are implemented.
    """
    if h <= 0:
        raise DomainError(f"step h={h} must be positive")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad
