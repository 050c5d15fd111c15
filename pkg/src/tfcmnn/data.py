"""Frame datasets: the TFCF on-disk format, speaker-based splitting,
deterministic batching, and the synthetic time/frequency-pattern
generator used for desk-scale experiments.

TFCF layout (all integers little-endian):

    magic 'TFCF' | u32 version | u16 feature dim | u16 context width
    (0 = unwindowed frames) | u64 record count | records | u32 CRC-32

Each record is u16 speaker_id, u8 label, then dim*max(width,1) float64
payload. The CRC covers everything between the magic and the CRC itself.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from tfcmnn.errors import DataFormatError, DomainError
from tfcmnn.numerics import SeededRng

TFCF_MAGIC = b"TFCF"
TFCF_VERSION = 1
N_CLASSES = 30


@dataclass
class FrameDataset:
    """Uniformly shaped labeled patches with speaker provenance.

    patches: (N, dim, width) for context-windowed data, or (N, dim) for
    raw frames (width == 0 on disk).
    """

    patches: np.ndarray
    labels: np.ndarray
    speakers: np.ndarray
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        n = len(self.patches)
        if len(self.labels) != n or len(self.speakers) != n:
            raise DataFormatError("patches/labels/speakers length mismatch")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def width(self) -> int:
        return self.patches.shape[2] if self.patches.ndim == 3 else 0

    def subset(self, idx: np.ndarray) -> "FrameDataset":
        return FrameDataset(self.patches[idx], self.labels[idx], self.speakers[idx],
                            self.n_classes)


# ---------------------------------------------------------------------------
# speaker-based splitting


def split_by_speaker(dataset: FrameDataset, dev_fraction: float, eval_speakers: int,
                     seed: int, per_speaker_dev: bool = False):
    """(train, dev, eval): eval gets all frames of `eval_speakers` randomly
    chosen speakers; dev is a random fraction of the remaining train
    FRAMES (the dev split shares speakers with train by design).
    per_speaker_dev=True instead carves dev out as whole speakers — a
    stricter protocol with no speaker overlap anywhere."""
    if not 0.0 <= dev_fraction < 1.0:
        raise DomainError(f"dev_fraction {dev_fraction} outside [0, 1)")
    speakers = np.unique(dataset.speakers)
    if len(speakers) < eval_speakers + 2:
        raise DataFormatError(
            f"need at least {eval_speakers + 2} speakers, have {len(speakers)}"
        )
    rng = SeededRng([seed, 101])
    order = rng.permutation(len(speakers))
    eval_ids = set(speakers[order[:eval_speakers]].tolist())
    eval_mask = np.isin(dataset.speakers, list(eval_ids))
    pool_idx = np.flatnonzero(~eval_mask)
    if per_speaker_dev:
        pool_ids = speakers[order[eval_speakers:]]
        n_dev_spk = int(round(dev_fraction * len(pool_ids)))
        dev_ids = set(pool_ids[:n_dev_spk].tolist())
        dev_mask = np.isin(dataset.speakers, list(dev_ids))
        dev_idx = np.flatnonzero(dev_mask)
        train_idx = np.flatnonzero(~eval_mask & ~dev_mask)
    else:
        n_dev = int(round(dev_fraction * len(pool_idx)))
        dev_order = rng.permutation(len(pool_idx))
        dev_idx = np.sort(pool_idx[dev_order[:n_dev]])
        train_idx = np.sort(pool_idx[dev_order[n_dev:]])
    return dataset.subset(train_idx), dataset.subset(dev_idx), dataset.subset(np.flatnonzero(eval_mask))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for a labeled speech corpus.

    Each class gets a signature pattern on a blank 18 x width patch:
    'time' classes a burst over all rows at a class-specific column
    range, 'freq' classes a band over all columns at a class-specific row
    range. Gaussian noise of scale `noise` is added on top.
    """

    n_classes: int = 4
    frames_per_class: int = 700
    noise: float = 0.3
    width: int = 15
    n_rows: int = 18
    n_speakers: int = 14
    amplitude: float = 1.0
    kinds: list[str] = field(default_factory=list)  # per-class 'time'/'freq'
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= N_CLASSES:
            raise DomainError(f"n_classes {self.n_classes} outside [2, {N_CLASSES}]")
        if self.noise < 0 or self.frames_per_class <= 0:
            raise DomainError("noise must be >= 0 and counts positive")
        if not self.kinds:
            self.kinds = ["time" if c % 2 == 0 else "freq" for c in range(self.n_classes)]
        if len(self.kinds) != self.n_classes or any(k not in ("time", "freq") for k in self.kinds):
            raise DomainError("kinds must list 'time'/'freq' per class")


def class_pattern(spec: SyntheticSpec, c: int) -> np.ndarray:
    """The noiseless signature patch for class c."""
    patch = np.zeros((spec.n_rows, spec.width))
    kind = spec.kinds[c]
    same_kind = [i for i in range(spec.n_classes) if spec.kinds[i] == kind]
    slot = same_kind.index(c)
    n_slots = len(same_kind)
    if kind == "time":
        extent = spec.width
    else:
        extent = spec.n_rows
    band = max(2, extent // (2 * n_slots))
    start = (slot * extent) // n_slots
    stop = min(start + band, extent)
    if kind == "time":
        patch[:, start:stop] = spec.amplitude
    else:
        patch[start:stop, :] = spec.amplitude
    return patch


def generate_synthetic(spec: SyntheticSpec) -> FrameDataset:
    """Deterministic labeled dataset; speakers round-robin over the
    examples so speaker splitting is exercisable."""
    rng = SeededRng([spec.seed, 202])
    n = spec.n_classes * spec.frames_per_class
    patches = np.empty((n, spec.n_rows, spec.width))
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    for c in range(spec.n_classes):
        base = class_pattern(spec, c)
        block = base + rng.normal(spec.noise, (spec.frames_per_class, spec.n_rows, spec.width)) \
            if spec.noise > 0 else np.broadcast_to(base, (spec.frames_per_class, spec.n_rows, spec.width)).copy()
        patches[pos:pos + spec.frames_per_class] = block
        labels[pos:pos + spec.frames_per_class] = c
        pos += spec.frames_per_class
    speakers = np.arange(n, dtype=np.int64) % spec.n_speakers
    # interleave classes so every speaker sees every class
    order = rng.permutation(n)
    return FrameDataset(patches[order], labels[order], speakers,
                        n_classes=max(N_CLASSES, spec.n_classes))


# ---------------------------------------------------------------------------
# TFCF read/write


def write_feature_file(path: str, dataset: FrameDataset) -> None:
    width = dataset.width
    dim = dataset.patches.shape[1]
    if dataset.speakers.size and (dataset.speakers.min() < 0 or dataset.speakers.max() > 0xFFFF):
        raise DataFormatError("speaker ids must fit in u16")
    payload = bytearray()
    payload += TFCF_VERSION.to_bytes(4, "little")
    payload += dim.to_bytes(2, "little")
    payload += width.to_bytes(2, "little")
    payload += len(dataset).to_bytes(8, "little")
    for i in range(len(dataset)):
        payload += int(dataset.speakers[i]).to_bytes(2, "little")
        payload += int(dataset.labels[i]).to_bytes(1, "little")
        payload += np.ascontiguousarray(dataset.patches[i], dtype="<f8").tobytes()
    crc = zlib.crc32(payload)
    with open(path, "wb") as f:
        f.write(TFCF_MAGIC)
        f.write(payload)
        f.write(crc.to_bytes(4, "little"))


def read_feature_file(path: str) -> FrameDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != TFCF_MAGIC:
        raise DataFormatError(f"{path}: not a TFCF file (bad magic)")
    if len(blob) < 24:
        raise DataFormatError(f"{path}: truncated TFCF header")
    payload, crc_bytes = blob[4:-4], blob[-4:]
    version = int.from_bytes(payload[0:4], "little")
    if version != TFCF_VERSION:
        raise DataFormatError(f"{path}: unsupported TFCF version {version}")
    dim = int.from_bytes(payload[4:6], "little")
    width = int.from_bytes(payload[6:8], "little")
    count = int.from_bytes(payload[8:16], "little")
    rec_floats = dim * max(width, 1)
    rec_bytes = 2 + 1 + 8 * rec_floats
    expected = 16 + count * rec_bytes
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: truncated TFCF payload (have {len(payload)}, need {expected})"
        )
    if zlib.crc32(payload) != int.from_bytes(crc_bytes, "little"):
        raise DataFormatError(f"{path}: TFCF CRC mismatch")
    shape = (count, dim, width) if width > 0 else (count, dim)
    patches = np.empty(shape)
    speakers = np.empty(count, dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    pos = 16
    for i in range(count):
        speakers[i] = int.from_bytes(payload[pos:pos + 2], "little")
        labels[i] = payload[pos + 2]
        vals = np.frombuffer(payload[pos + 3:pos + 3 + 8 * rec_floats], dtype="<f8")
        patches[i] = vals.reshape(shape[1:])
        pos += rec_bytes
    return FrameDataset(patches, labels, speakers)


def import_csv(path: str) -> FrameDataset:
    """Interop import: one frame per line, `speaker,label,f1..f18`."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.shape[1] < 3:
        raise DataFormatError(f"{path}: need at least speaker,label,f1 columns")
    return FrameDataset(rows[:, 2:], rows[:, 1].astype(np.int64), rows[:, 0].astype(np.int64))


# ---------------------------------------------------------------------------
# batching


def batch_iterator(n_examples: int, batch_size: int, seed: int, epoch_index: int):
    """Seeded permutation of range(n_examples) cut into consecutive
    batches; the last batch may be short. Yields index arrays."""
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    perm = SeededRng([seed, 303, epoch_index]).permutation(n_examples)
    for lo in range(0, n_examples, batch_size):
        yield perm[lo:lo + batch_size]
