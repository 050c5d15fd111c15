"""Layer forward/backward passes: axis-selective 1D convolution with
maxout, dense maxout, max/mean pooling, ReLU, dropout, and the softmax
cross-entropy head.

Conventions used throughout:

- Inputs are batched: shape (B, ...). Every forward returns (output,
  cache); every backward consumes its matching cache and returns the
  input gradient plus weight gradients SUMMED over the batch (the
  training loop divides by the batch size).
- Convolution inputs are (B, span, extent): `extent` is the sliding axis,
  `span` the axis each filter covers in full. Orienting the raw 18xW
  patch per branch axis (time slides over columns, frequency over rows)
  is the model assembler's job.
- All argmax tie-breaks (maxout pieces, pooling) go to the lowest index.
- ReLU's subgradient at exactly 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tfcmnn.errors import DomainError, ShapeError

# ---------------------------------------------------------------------------
# layer parameter containers


@dataclass
class DenseMaxoutLayer:
    """Fully connected maxout layer: W is (d, m, k), b is (m, k) or None.

    Output unit i is max over the k affine pieces x.W[:, i, j] + b[i, j].
    """

    W: np.ndarray
    b: np.ndarray | None

    def __post_init__(self):
        if self.W.ndim != 3:
            raise ShapeError(f"dense maxout W must be rank 3, got {self.W.shape}")
        if self.b is not None and self.b.shape != self.W.shape[1:]:
            raise ShapeError(f"bias shape {self.b.shape} != {self.W.shape[1:]}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def k(self) -> int:
        return self.W.shape[2]


@dataclass
class ConvAxisLayer:
    """1D convolution with maxout over k linear maps per output map.

    Weights are (maps*pieces, kernel, span): each linear map slides along
    one axis only and covers the entire other axis (`span`) at every
    position. `axis` records which spectrogram axis this layer slides
    along; the arithmetic itself always slides over the last input axis.
    """

    axis: str
    maps: int
    kernel: int
    pieces: int
    weights: np.ndarray
    biases: np.ndarray | None

    def __post_init__(self):
        if self.axis not in ("time", "frequency"):
            raise DomainError(f"axis must be 'time' or 'frequency', got {self.axis!r}")
        expect = (self.maps * self.pieces, self.kernel)
        if self.weights.ndim != 3 or self.weights.shape[:2] != expect:
            raise ShapeError(
                f"conv weights must be ({self.maps * self.pieces}, {self.kernel}, span), "
                f"got {self.weights.shape}"
            )
        if self.biases is not None and self.biases.shape != (self.maps * self.pieces,):
            raise ShapeError(f"conv biases shape {self.biases.shape}")

    @property
    def span(self) -> int:
        return self.weights.shape[2]


@dataclass
class MaxPoolLayer:
    """Non-overlapping pooling along the sliding axis, stride = size.

    A trailing partial window is pooled as-is, so the output length is
    ceil(L / size). `kind` is normally 'max'; 'mean' exists as a fidelity
    switch.
    """

    size: int
    kind: str = "max"

    def __post_init__(self):
        if self.size < 1:
            raise DomainError(f"pool size must be >= 1, got {self.size}")
        if self.kind not in ("max", "mean"):
            raise DomainError(f"pool kind must be 'max' or 'mean', got {self.kind!r}")


@dataclass
class SoftmaxHead:
    """Linear classifier + softmax over n_classes (30 for phone frames)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"head shapes {self.W.shape} / {self.b.shape}")

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]


@dataclass
class DropoutSpec:
    """Keep probability for fully connected maxout outputs only."""

    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"keep probability must be in (0, 1], got {self.p}")


@dataclass
class LayerCache:
    """Everything a backward pass needs from its forward pass."""

    x: np.ndarray | None = None
    z: np.ndarray | None = None
    cols: np.ndarray | None = None
    argmax: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# ReLU


def relu_forward(z: np.ndarray):
    return np.maximum(z, 0.0), LayerCache(z=z)


def relu_backward(grad: np.ndarray, cache: LayerCache) -> np.ndarray:
    return grad * (cache.z > 0)


# ---------------------------------------------------------------------------
# dense maxout


def dense_maxout_forward(x: np.ndarray, layer: DenseMaxoutLayer):
    """x: (B, d) -> (B, m). Cache records the winning piece per unit."""
    if x.ndim != 2 or x.shape[1] != layer.d:
        raise ShapeError(f"input {x.shape} incompatible with d={layer.d}")
    z = x @ layer.W.reshape(layer.d, layer.m * layer.k)
    if layer.b is not None:
        z = z + layer.b.reshape(-1)
    z = z.reshape(x.shape[0], layer.m, layer.k)
    arg = np.argmax(z, axis=2)
    y = np.take_along_axis(z, arg[..., np.newaxis], axis=2)[..., 0]
    return y, LayerCache(x=x, argmax=arg)


def dense_maxout_backward(grad: np.ndarray, layer: DenseMaxoutLayer, cache: LayerCache):
    """grad: (B, m) -> (dx, dW, db); gradient flows only through the
    winning piece (its derivative through the max is exactly 1)."""
    B = grad.shape[0]
    gz = np.zeros((B, layer.m, layer.k))
    np.put_along_axis(gz, cache.argmax[..., np.newaxis], grad[..., np.newaxis], axis=2)
    gzf = gz.reshape(B, layer.m * layer.k)
    dW = (cache.x.T @ gzf).reshape(layer.W.shape)
    db = gzf.sum(axis=0).reshape(layer.m, layer.k) if layer.b is not None else None
    dx = gzf @ layer.W.reshape(layer.d, layer.m * layer.k).T
    return dx, dW, db


# ---------------------------------------------------------------------------
# axis convolution with maxout


def conv_axis_forward(x: np.ndarray, layer: ConvAxisLayer):
    """x: (B, span, extent) or (span, extent) -> (B, maps, L), L = extent - K + 1.

    Valid padding, stride 1; each linear map sees a full kernel x span
    receptive field at every position; maxout over the k maps per unit.
    """
    single = x.ndim == 2
    if single:
        x = x[np.newaxis]
    B, span, extent = x.shape
    if span != layer.span:
        raise ShapeError(f"input span {span} != layer span {layer.span}")
    if extent < layer.kernel:
        raise ShapeError(
            f"kernel {layer.kernel} exceeds sliding extent {extent} ({layer.axis} axis)"
        )
    K, M = layer.kernel, layer.maps * layer.pieces
    L = extent - K + 1
    win = sliding_window_view(x, K, axis=2)            # (B, span, L, K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1)).reshape(B, L, K * span)
    z = cols @ layer.weights.reshape(M, K * span).T    # (B, L, M)
    if layer.biases is not None:
        z = z + layer.biases
    z = z.reshape(B, L, layer.maps, layer.pieces)
    arg = np.argmax(z, axis=3)
    y = np.take_along_axis(z, arg[..., np.newaxis], axis=3)[..., 0]  # (B, L, maps)
    out = np.ascontiguousarray(y.transpose(0, 2, 1))   # (B, maps, L)
    cache = LayerCache(cols=cols, argmax=arg, extra={"single": single, "extent": extent})
    return (out[0] if single else out), cache


def conv_axis_backward(grad: np.ndarray, layer: ConvAxisLayer, cache: LayerCache):
    """grad: (B, maps, L) -> (dx, dweights, dbiases); weight gradients
    accumulate over every shared position."""
    if cache.extra["single"] and grad.ndim == 2:
        grad = grad[np.newaxis]
    B, _, L = grad.shape
    K, span, M = layer.kernel, layer.span, layer.maps * layer.pieces
    g = grad.transpose(0, 2, 1)                        # (B, L, maps)
    gz = np.zeros((B, L, layer.maps, layer.pieces))
    np.put_along_axis(gz, cache.argmax[..., np.newaxis], g[..., np.newaxis], axis=3)
    gzf = gz.reshape(B, L, M)
    dw = np.einsum("blm,blc->mc", gzf, cache.cols).reshape(layer.weights.shape)
    db = gzf.sum(axis=(0, 1)) if layer.biases is not None else None
    dcols = gzf @ layer.weights.reshape(M, K * span)   # (B, L, K*span)
    dwin = dcols.reshape(B, L, K, span).transpose(0, 3, 1, 2)  # (B, span, L, K)
    dx = np.zeros((B, span, cache.extra["extent"]))
    for u in range(K):
        dx[:, :, u:u + L] += dwin[:, :, :, u]
    if cache.extra["single"]:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(maps: np.ndarray, layer: MaxPoolLayer):
    """maps: (B, m, L) -> (B, m, ceil(L/size)); trailing partial window
    pooled as-is."""
    single = maps.ndim == 2
    if single:
        maps = maps[np.newaxis]
    B, m, L = maps.shape
    S = layer.size
    n_out = (L + S - 1) // S
    out = np.empty((B, m, n_out))
    arg = np.zeros((B, m, n_out), dtype=np.int64)
    for t in range(n_out):
        seg = maps[:, :, t * S:min((t + 1) * S, L)]
        if layer.kind == "max":
            a = np.argmax(seg, axis=2)
            out[:, :, t] = np.take_along_axis(seg, a[..., np.newaxis], axis=2)[..., 0]
            arg[:, :, t] = t * S + a
        else:
            out[:, :, t] = seg.mean(axis=2)
    cache = LayerCache(argmax=arg, extra={"single": single, "L": L, "kind": layer.kind, "S": S})
    return (out[0] if single else out), cache


def maxpool_backward(grad: np.ndarray, layer: MaxPoolLayer, cache: LayerCache) -> np.ndarray:
    if cache.extra["single"] and grad.ndim == 2:
        grad = grad[np.newaxis]
    B, m, n_out = grad.shape
    L, S = cache.extra["L"], cache.extra["S"]
    dx = np.zeros((B, m, L))
    for t in range(n_out):
        lo, hi = t * S, min((t + 1) * S, L)
        if cache.extra["kind"] == "max":
            sl = dx[:, :, lo:hi]
            a = (cache.argmax[:, :, t] - lo)[..., np.newaxis]
            np.put_along_axis(sl, a, np.take_along_axis(sl, a, axis=2) + grad[:, :, t:t + 1], axis=2)
        else:
            dx[:, :, lo:hi] += grad[:, :, t:t + 1] / (hi - lo)
    if cache.extra["single"]:
        dx = dx[0]
    return dx


# ---------------------------------------------------------------------------
# dropout


def dropout_apply(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Train-time masking of FC maxout outputs (before the next layer's
    weights see them)."""
    if y.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != activations {y.shape}")
    return y * mask


def dropout_test_scale(w: np.ndarray, p: float) -> np.ndarray:
    """Test-time replacement for masking: consuming weights scaled by p."""
    if not 0.0 < p <= 1.0:
        raise DomainError(f"keep probability must be in (0, 1], got {p}")
    return w * p


# ---------------------------------------------------------------------------
# softmax + cross-entropy head


def softmax_xent_forward(logits: np.ndarray, labels):
    """logits: (B, C) or (C,); labels int in [0, C). Returns (per-example
    losses, probs), both batched. Softmax is max-subtracted for stability."""
    single = logits.ndim == 1
    if single:
        logits = logits[np.newaxis]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise DomainError(f"label outside [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    losses = -np.log(probs[np.arange(len(labels)), labels])
    if single:
        return losses[0], probs[0]
    return losses, probs


def softmax_xent_backward(probs: np.ndarray, labels) -> np.ndarray:
    """d loss / d logits = probs - one_hot(label), per example."""
    single = probs.ndim == 1
    if single:
        probs = probs[np.newaxis]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad[0] if single else grad


def head_forward(x: np.ndarray, head: SoftmaxHead) -> np.ndarray:
    """Logits for a batch: (B, features) -> (B, n_classes)."""
    if x.shape[1] != head.W.shape[0]:
        raise ShapeError(f"head input {x.shape} != features {head.W.shape[0]}")
    return x @ head.W + head.b
