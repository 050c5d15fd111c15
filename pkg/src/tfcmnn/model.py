"""Structure-string grammar, network assembly, joint forward/backward,
and the versioned binary checkpoint format.

The grammar matches the experiment tables' notation: "C40 K7 S2 F400
F400" is one conv block (40 maxout maps, kernel 7, pool 2) followed by
two fully connected maxout layers of 400 units. For the two-branch
network the conv tokens describe EACH branch (independent weights) and
the F tokens the shared head over the concatenated branch outputs, time
branch first.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from tfcmnn.errors import DataFormatError, DomainError, ShapeError
from tfcmnn.layers import (
    ConvAxisLayer,
    DenseMaxoutLayer,
    DropoutSpec,
    LayerCache,
    MaxPoolLayer,
    SoftmaxHead,
    conv_axis_backward,
    conv_axis_forward,
    dense_maxout_backward,
    dense_maxout_forward,
    head_forward,
    maxpool_backward,
    maxpool_forward,
    softmax_xent_backward,
    softmax_xent_forward,
)
from tfcmnn.numerics import SeededRng

N_ROWS = 18
N_CLASSES = 30
INIT_SCHEME = "uniform-sqrt6-over-fanin"

CHECKPOINT_MAGIC = b"TFCM"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# structure grammar


@dataclass(frozen=True)
class ConvBlockSpec:
    maps: int
    kernel: int
    pool: int


@dataclass
class StructureSpec:
    """Parsed form of a structure string plus the knobs the string omits."""

    conv_blocks: list[ConvBlockSpec]
    fc_layers: list[int]
    pieces: int = 2
    dropout_keep: float | None = None
    width: int = 15

    def canonical(self) -> str:
        parts = []
        for blk in self.conv_blocks:
            parts += [f"C{blk.maps}", f"K{blk.kernel}", f"S{blk.pool}"]
        parts += [f"F{n}" for n in self.fc_layers]
        return " ".join(parts)


_TOKEN_RE = re.compile(r"^([CKSF])([0-9]+)$")


def parse_structure(text: str, pieces: int = 2, dropout_keep: float | None = None,
                    width: int = 15) -> StructureSpec:
    """Parse "C40 K7 S2 F400 F400" notation into a StructureSpec.

    Every C must be followed by its K and S; F layers come last; at least
    one F is required. Errors carry the 1-based token position.
    """
    tokens = text.split()
    if not tokens:
        raise DataFormatError("empty structure string")
    conv_blocks: list[ConvBlockSpec] = []
    fc_layers: list[int] = []
    i = 0
    while i < len(tokens):
        m = _TOKEN_RE.match(tokens[i])
        if m is None:
            raise DataFormatError(f"bad token {tokens[i]!r} at position {i + 1}")
        letter, value = m.group(1), int(m.group(2))
        if value <= 0:
            raise DataFormatError(f"count must be positive in {tokens[i]!r} at position {i + 1}")
        if letter == "C":
            if fc_layers:
                raise DataFormatError(f"conv block after F layer at position {i + 1}")
            km = _TOKEN_RE.match(tokens[i + 1]) if i + 1 < len(tokens) else None
            if km is None or km.group(1) != "K":
                raise DataFormatError(f"expected K after C at position {i + 2}")
            sm = _TOKEN_RE.match(tokens[i + 2]) if i + 2 < len(tokens) else None
            if sm is None or sm.group(1) != "S":
                raise DataFormatError(f"expected S after K at position {i + 3}")
            conv_blocks.append(ConvBlockSpec(value, int(km.group(2)), int(sm.group(2))))
            i += 3
        elif letter == "F":
            fc_layers.append(value)
            i += 1
        else:
            raise DataFormatError(f"dangling {letter} token at position {i + 1}")
    if not fc_layers:
        raise DataFormatError("structure needs at least one F layer")
    if pieces < 1:
        raise DomainError(f"maxout pieces must be >= 1, got {pieces}")
    return StructureSpec(conv_blocks, fc_layers, pieces, dropout_keep, width)


# ---------------------------------------------------------------------------
# model containers


@dataclass
class ConvStage:
    """One branch's conv pipeline: (conv -> maxout -> pool) blocks plus
    the flatten at the end. in_shape is the oriented (span, extent)."""

    axis: str
    blocks: list[tuple[ConvAxisLayer, MaxPoolLayer]]
    in_shape: tuple[int, int]
    out_dim: int


@dataclass
class CMNNModel:
    kind: str  # 'cmnn-time' | 'cmnn-freq'
    structure: StructureSpec
    stage: ConvStage
    fc: list[DenseMaxoutLayer]
    head: SoftmaxHead
    dropout: DropoutSpec | None
    seed: int
    n_rows: int = N_ROWS

    @property
    def width(self) -> int:
        return self.structure.width


@dataclass
class TFCMNNModel:
    kind: str  # always 'tfcmnn'
    structure: StructureSpec
    time_stage: ConvStage
    freq_stage: ConvStage
    fc: list[DenseMaxoutLayer]
    head: SoftmaxHead
    dropout: DropoutSpec | None
    seed: int
    n_rows: int = N_ROWS

    @property
    def width(self) -> int:
        return self.structure.width


Model = CMNNModel | TFCMNNModel


# ---------------------------------------------------------------------------
# assembly


def _orient(patches: np.ndarray, axis: str) -> np.ndarray:
    """Put the sliding axis last: time slides over columns (as stored),
    frequency slides over the 18 rows."""
    if axis == "time":
        return patches
    return np.ascontiguousarray(np.swapaxes(patches, -1, -2))


def _init_uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, shape)


def _build_stage(spec: StructureSpec, axis: str, rng: SeededRng, n_rows: int,
                 branch_name: str) -> ConvStage:
    span, extent = (n_rows, spec.width) if axis == "time" else (spec.width, n_rows)
    in_shape = (span, extent)
    blocks = []
    for blk in spec.conv_blocks:
        if blk.kernel > extent:
            raise ShapeError(
                f"{branch_name} branch: kernel {blk.kernel} exceeds sliding extent {extent}"
            )
        n_lin = blk.maps * spec.pieces
        weights = _init_uniform(rng, (n_lin, blk.kernel, span), blk.kernel * span)
        biases = np.zeros(n_lin)
        conv = ConvAxisLayer(axis, blk.maps, blk.kernel, spec.pieces, weights, biases)
        pool = MaxPoolLayer(blk.pool)
        blocks.append((conv, pool))
        conv_len = extent - blk.kernel + 1
        extent = (conv_len + blk.pool - 1) // blk.pool
        span = blk.maps
    return ConvStage(axis, blocks, in_shape, span * extent)


def _build_fc_and_head(spec: StructureSpec, rng: SeededRng, in_dim: int, n_classes: int):
    fc = []
    d = in_dim
    for m in spec.fc_layers:
        W = _init_uniform(rng, (d, m, spec.pieces), d)
        fc.append(DenseMaxoutLayer(W, np.zeros((m, spec.pieces))))
        d = m
    head = SoftmaxHead(_init_uniform(rng, (d, n_classes), d), np.zeros(n_classes))
    return fc, head


def build_cmnn(spec: StructureSpec, axis: str, seed: int, n_rows: int = N_ROWS,
               n_classes: int = N_CLASSES) -> CMNNModel:
    """Single-branch convolutional maxout network sliding along `axis`."""
    if axis not in ("time", "frequency"):
        raise DomainError(f"axis must be 'time' or 'frequency', got {axis!r}")
    rng = SeededRng(seed).child(0)
    stage = _build_stage(spec, axis, rng, n_rows, axis)
    fc, head = _build_fc_and_head(spec, rng, stage.out_dim, n_classes)
    dropout = DropoutSpec(spec.dropout_keep) if spec.dropout_keep is not None else None
    kind = "cmnn-time" if axis == "time" else "cmnn-freq"
    return CMNNModel(kind, spec, stage, fc, head, dropout, seed, n_rows)


def build_tfcmnn(spec: StructureSpec, seed: int, n_rows: int = N_ROWS,
                 n_classes: int = N_CLASSES) -> TFCMNNModel:
    """Two-branch network: same conv spec on both axes, independent
    weights, shared fully connected head over [time | frequency] concat."""
    rng = SeededRng(seed).child(0)
    time_stage = _build_stage(spec, "time", rng, n_rows, "time")
    freq_stage = _build_stage(spec, "frequency", rng, n_rows, "frequency")
    fc, head = _build_fc_and_head(spec, rng, time_stage.out_dim + freq_stage.out_dim, n_classes)
    dropout = DropoutSpec(spec.dropout_keep) if spec.dropout_keep is not None else None
    return TFCMNNModel("tfcmnn", spec, time_stage, freq_stage, fc, head, dropout, seed, n_rows)


def build_model(kind: str, spec: StructureSpec, seed: int, n_rows: int = N_ROWS,
                n_classes: int = N_CLASSES) -> Model:
    if kind == "tfcmnn":
        return build_tfcmnn(spec, seed, n_rows, n_classes)
    if kind == "cmnn-time":
        return build_cmnn(spec, "time", seed, n_rows, n_classes)
    if kind == "cmnn-freq":
        return build_cmnn(spec, "frequency", seed, n_rows, n_classes)
    raise DomainError(f"unknown model kind {kind!r}")


def _stages(model: Model) -> list[tuple[str, ConvStage]]:
    if isinstance(model, TFCMNNModel):
        return [("time", model.time_stage), ("freq", model.freq_stage)]
    return [("stage", model.stage)]


def named_params(model: Model):
    """(name, array) pairs in the fixed declaration order used by SGD
    updates and checkpoint serialization."""
    for tag, stage in _stages(model):
        for i, (conv, _pool) in enumerate(stage.blocks):
            yield f"{tag}.conv{i}.W", conv.weights
            if conv.biases is not None:
                yield f"{tag}.conv{i}.b", conv.biases
    for i, layer in enumerate(model.fc):
        yield f"fc{i}.W", layer.W
        if layer.b is not None:
            yield f"fc{i}.b", layer.b
    yield "head.W", model.head.W
    yield "head.b", model.head.b


def param_count(model: Model):
    """Total trainable scalar count, itemized per tensor.

    Computed from the declared layer dimensions (not array sizes), so a
    test can cross-check it by enumerating the actual arrays.
    """
    items = []
    for tag, stage in _stages(model):
        for i, (conv, _pool) in enumerate(stage.blocks):
            n_lin = conv.maps * conv.pieces
            items.append((f"{tag}.conv{i}.W", (n_lin, conv.kernel, conv.span),
                          n_lin * conv.kernel * conv.span))
            if conv.biases is not None:
                items.append((f"{tag}.conv{i}.b", (n_lin,), n_lin))
    for i, layer in enumerate(model.fc):
        items.append((f"fc{i}.W", (layer.d, layer.m, layer.k), layer.d * layer.m * layer.k))
        if layer.b is not None:
            items.append((f"fc{i}.b", (layer.m, layer.k), layer.m * layer.k))
    f, c = model.head.W.shape
    items.append(("head.W", (f, c), f * c))
    items.append(("head.b", (c,), c))
    return sum(n for _, _, n in items), items


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCaches:
    mode: str
    stage_caches: list[list[tuple[LayerCache, LayerCache]]]
    stage_shapes: list[tuple[int, ...]]   # pooled (maps, length) per stage
    branch_dims: list[int]
    fc_caches: list[LayerCache]
    fc_masks: list[np.ndarray | None]
    head_in: np.ndarray | None = None
    probs: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _stage_forward(stage: ConvStage, patches: np.ndarray):
    x = _orient(patches, stage.axis)
    caches = []
    for conv, pool in stage.blocks:
        y, ccache = conv_axis_forward(x, conv)
        x, pcache = maxpool_forward(y, pool)
        caches.append((ccache, pcache))
    flat = x.reshape(x.shape[0], -1)
    return flat, caches, x.shape[1:]


def _stage_backward(stage: ConvStage, grad_flat: np.ndarray, caches, grads: dict,
                    tag: str, pooled_shape: tuple[int, ...]):
    g = grad_flat.reshape(grad_flat.shape[0], *pooled_shape)
    for i in range(len(stage.blocks) - 1, -1, -1):
        conv, pool = stage.blocks[i]
        ccache, pcache = caches[i]
        g = maxpool_backward(g, pool, pcache)
        g, dw, db = conv_axis_backward(g, conv, ccache)
        grads[f"{tag}.conv{i}.W"] = dw
        if db is not None:
            grads[f"{tag}.conv{i}.b"] = db
    return g


def forward(model: Model, patches: np.ndarray, mode: str = "test",
            rng: SeededRng | None = None):
    """Run the network on a batch of 18 x width patches.

    mode='train' draws fresh dropout masks per example (rng required when
    the model has dropout); mode='test' scales the dropped activations by
    p, which is exactly the consuming-weights-times-p rule.
    Returns (probs, caches).
    """
    if mode not in ("train", "test"):
        raise DomainError(f"mode must be 'train' or 'test', got {mode!r}")
    single = patches.ndim == 2
    if single:
        patches = patches[np.newaxis]
    if patches.shape[1:] != (model.n_rows, model.width):
        raise ShapeError(
            f"patch shape {patches.shape[1:]} != ({model.n_rows}, {model.width})"
        )
    if mode == "train" and model.dropout is not None and rng is None:
        raise DomainError("train mode with dropout requires an rng")

    flats, stage_caches, stage_shapes = [], [], []
    for _tag, stage in _stages(model):
        flat, caches, pooled_shape = _stage_forward(stage, patches)
        flats.append(flat)
        stage_caches.append(caches)
        stage_shapes.append(pooled_shape)
    x = np.concatenate(flats, axis=1) if len(flats) > 1 else flats[0]

    fc_caches, fc_masks = [], []
    for layer in model.fc:
        y, cache = dense_maxout_forward(x, layer)
        mask = None
        if model.dropout is not None:
            if mode == "train":
                mask = rng.bernoulli_mask(y.size, model.dropout.p).reshape(y.shape)
                y = y * mask
            else:
                y = y * model.dropout.p
        fc_caches.append(cache)
        fc_masks.append(mask)
        x = y
    logits = head_forward(x, model.head)
    _, probs = softmax_xent_forward(logits, np.zeros(len(logits), dtype=np.int64))
    caches = ForwardCaches(mode, stage_caches, stage_shapes,
                           [f.shape[1] for f in flats], fc_caches, fc_masks,
                           head_in=x, probs=probs, extra={"single": single})
    return (probs[0] if single else probs), caches


def backward(model: Model, caches: ForwardCaches, labels) -> dict[str, np.ndarray]:
    """Gradients of the summed cross-entropy loss w.r.t. every parameter,
    keyed like named_params. The concat gradient is split back to the
    branches at the recorded boundary."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grads: dict[str, np.ndarray] = {}
    g = softmax_xent_backward(caches.probs, labels)
    grads["head.W"] = caches.head_in.T @ g
    grads["head.b"] = g.sum(axis=0)
    g = g @ model.head.W.T
    for i in range(len(model.fc) - 1, -1, -1):
        if model.dropout is not None:
            if caches.mode == "train":
                g = g * caches.fc_masks[i]
            else:
                g = g * model.dropout.p
        g, dw, db = dense_maxout_backward(g, model.fc[i], caches.fc_caches[i])
        grads[f"fc{i}.W"] = dw
        if db is not None:
            grads[f"fc{i}.b"] = db
    offset = 0
    for (tag, stage), scaches, sshape, dim in zip(
            _stages(model), caches.stage_caches, caches.stage_shapes, caches.branch_dims):
        gb = g[:, offset:offset + dim]
        offset += dim
        _stage_backward(stage, gb, scaches, grads, tag, sshape)
    return grads


def loss_and_grads(model: Model, patches: np.ndarray, labels, mode: str = "train",
                   rng: SeededRng | None = None):
    """Mean loss plus mean-over-batch gradients, the SGD step's input."""
    probs, caches = forward(model, patches, mode, rng)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    losses = -np.log(np.maximum(caches.probs[np.arange(len(labels)), labels], 1e-300))
    grads = backward(model, caches, labels)
    n = len(labels)
    return losses, {k: v / n for k, v in grads.items()}


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic 'TFCM' | u32 version | u32 header length | header JSON (utf-8) |
# every tensor from named_params as little-endian float64 in order |
# u32 CRC-32 of everything between the magic and the CRC.


def save_checkpoint(model: Model, path: str) -> None:
    header = {
        "kind": model.kind,
        "structure": model.structure.canonical(),
        "axes": [tag for tag, _ in _stages(model)],
        "pieces": model.structure.pieces,
        "dropout_keep": model.structure.dropout_keep,
        "width": model.structure.width,
        "n_rows": model.n_rows,
        "n_classes": model.head.n_classes,
        "seed": model.seed,
        "init": INIT_SCHEME,
        "tensors": [[name, list(arr.shape)] for name, arr in named_params(model)],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_VERSION.to_bytes(4, "little")
    payload += len(hbytes).to_bytes(4, "little")
    payload += hbytes
    for _name, arr in named_params(model):
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    crc = zlib.crc32(payload)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(payload)
        f.write(crc.to_bytes(4, "little"))


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a TFCM checkpoint (bad magic)")
    payload, crc_bytes = blob[4:-4], blob[-4:]
    if zlib.crc32(payload) != int.from_bytes(crc_bytes, "little"):
        raise DataFormatError(f"{path}: checkpoint CRC mismatch")
    version = int.from_bytes(payload[0:4], "little")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    hlen = int.from_bytes(payload[4:8], "little")
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    spec = parse_structure(header["structure"], pieces=header["pieces"],
                           dropout_keep=header["dropout_keep"], width=header["width"])
    model = build_model(header["kind"], spec, header["seed"], n_rows=header["n_rows"],
                        n_classes=header["n_classes"])
    pos = 8 + hlen
    for (name, arr), (hname, hshape) in zip(named_params(model), header["tensors"]):
        if name != hname or list(arr.shape) != hshape:
            raise DataFormatError(f"{path}: tensor layout mismatch at {hname}")
        nbytes = arr.size * 8
        if pos + nbytes > len(payload):
            raise DataFormatError(f"{path}: truncated checkpoint at tensor {name}")
        arr[...] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8").reshape(arr.shape)
        pos += nbytes
    if pos != len(payload):
        raise DataFormatError(f"{path}: trailing bytes after last tensor")
    return model
