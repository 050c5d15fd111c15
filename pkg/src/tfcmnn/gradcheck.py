"""Whole-model gradient validation against the central finite-difference
oracle.

Nonsmooth coordinates (maxout or pooling argmax about to flip under the
probe step) are detected independently of the analytic path by comparing
the finite-difference estimate at h and h/2: where the two disagree the
loss is locally kinked and the coordinate is excluded as a tie.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tfcmnn.model import Model, forward, backward, named_params
from tfcmnn.numerics import finite_diff_gradient


@dataclass
class LayerCheck:
    name: str
    max_rel_err: float
    frac_ok: float
    n_coords: int
    n_excluded: int


def _mean_loss(model: Model, patches: np.ndarray, labels: np.ndarray) -> float:
    _, caches = forward(model, patches, mode="test")
    p = caches.probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, 1e-300))))


def _analytic_grads(model: Model, patches: np.ndarray, labels: np.ndarray):
    _, caches = forward(model, patches, mode="test")
    grads = backward(model, caches, labels)
    return {k: v / len(labels) for k, v in grads.items()}


def gradient_check(model: Model, patches: np.ndarray, labels, h: float = 1e-5,
                   rel_tol: float = 1e-5, nonsmooth_tol: float = 1e-3,
                   corrupt: bool = False) -> list[LayerCheck]:
    """Per-parameter-tensor comparison of analytic vs finite-difference
    gradients of the mean cross-entropy loss.

    `corrupt` is a test hook that perturbs the analytic gradients so the
    harness itself can be shown to catch a broken backward pass.
    """
    labels = np.asarray(labels, dtype=np.int64)
    # FD round-off noise grows with |loss|; the small-denominator floor
    # must grow with it or noise on near-zero coordinates reads as error
    floor = 1e-6 * max(1.0, abs(_mean_loss(model, patches, labels)))
    analytic = _analytic_grads(model, patches, labels)
    if corrupt:
        analytic = {k: v + 1e-2 for k, v in analytic.items()}
    results = []
    for name, arr in named_params(model):
        f = lambda _a: _mean_loss(model, patches, labels)  # noqa: E731 (arr mutated in place)
        fd_h = finite_diff_gradient(f, arr, h)
        fd_h2 = finite_diff_gradient(f, arr, h / 2)
        a = analytic[name]
        scale = np.maximum(np.maximum(np.abs(fd_h), np.abs(fd_h2)), floor)
        smooth = np.abs(fd_h - fd_h2) / scale <= nonsmooth_tol
        # Richardson extrapolation cancels the O(h^2) truncation term,
        # which otherwise dominates on high-curvature coordinates
        fd = (4.0 * fd_h2 - fd_h) / 3.0
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        rel = np.abs(a - fd) / denom
        included = rel[smooth]
        if included.size:
            max_rel = float(included.max())
            frac_ok = float(np.mean(included <= rel_tol))
        else:
            max_rel, frac_ok = 0.0, 1.0
        results.append(LayerCheck(name, max_rel, frac_ok, int(arr.size),
                                  int(arr.size - smooth.sum())))
    return results


def all_pass(results: list[LayerCheck], min_frac: float = 0.99) -> bool:
    return all(r.frac_ok >= min_frac for r in results)
