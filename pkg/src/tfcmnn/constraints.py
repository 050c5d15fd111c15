"""Max-norm weight constraint: project weight vectors back onto the L2
ball of radius C after each update, direction preserved.

Granularity is per-unit incoming weights: every maxout piece's input row,
every convolutional linear map's kernel, every output unit's column. The
projection runs after every mini-batch step, not per epoch, so no single
update can push a unit outside the ball.
"""

from __future__ import annotations

import numpy as np

from tfcmnn.errors import DomainError


def max_norm_project(w: np.ndarray, c: float) -> np.ndarray:
    """Project one weight vector onto the closed L2 ball of radius c.

    Inside the ball the vector is returned untouched, so the projection is
    exactly idempotent. The rescale loop absorbs the one-ulp overshoot a
    single multiply can leave behind.
    """
    if c <= 0:
        raise DomainError(f"max-norm radius must be positive, got {c}")
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.sqrt(np.sum(w * w)))
    if norm <= c:
        return w
    out = w * (c / norm)
    while float(np.sqrt(np.sum(out * out))) > c:
        # guard against c/norm rounding to 1.0 when norm is 1 ulp over c
        out = out * min(c / float(np.sqrt(np.sum(out * out))), 1.0 - 2.0**-53)
    return out


def project_rows(w: np.ndarray, c: float, row_axes: tuple[int, ...]) -> np.ndarray:
    """Vectorized per-row projection of a weight tensor, in place.

    `row_axes` are the axes of one unit's incoming weight vector; the
    remaining axes enumerate units. Only rows with norm > c are touched.
    """
    if c <= 0:
        raise DomainError(f"max-norm radius must be positive, got {c}")
    while True:
        norms = np.sqrt(np.sum(w * w, axis=row_axes, keepdims=True))
        over = norms > c
        if not np.any(over):
            return w
        scale = np.where(over, np.minimum(c / np.maximum(norms, 1e-300), 1.0 - 2.0**-53), 1.0)
        w *= scale
