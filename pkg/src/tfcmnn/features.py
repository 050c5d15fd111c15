"""LHCB feature front-end: raw audio -> 18 log critical-band filter-bank
coefficients per 23 ms frame -> normalized, context-windowed patches.

The filter bank is Hanning-shaped (raised cosine) in the Bark domain,
centers uniform at 1..18 Bark with +-1 Bark support, sampled at the DFT
bin frequencies. Bark(f) = 13 atan(0.00076 f) + 3.5 atan((f/7500)^2).
The exact bank of the original Persian-speech front-end is not public;
this critical-band construction is the documented stand-in.
"""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tfcmnn.data import FrameDataset
from tfcmnn.errors import DataFormatError, DomainError, ShapeError

N_COEFFS = 18
LOG_FLOOR = 1e-10
TARGET_VARIANCE = 0.5


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise DataFormatError("empty audio clip")
        if self.sample_rate < 8000:
            raise DomainError(f"sample rate {self.sample_rate} < 8000 Hz")


@dataclass
class FilterBank:
    responses: np.ndarray     # (n_filters, n_bins) non-negative weights
    center_barks: np.ndarray  # strictly increasing
    sample_rate: int
    fft_size: int

    @property
    def n_filters(self) -> int:
        return self.responses.shape[0]


@dataclass
class FeatureMatrix:
    """Per-utterance LHCB frames plus per-frame labels."""

    frames: np.ndarray   # (n_frames, 18)
    labels: np.ndarray   # (n_frames,) in [0, 29]
    utterance_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_COEFFS:
            raise ShapeError(f"frames must be (n, {N_COEFFS}), got {self.frames.shape}")
        if len(self.labels) != len(self.frames):
            raise DataFormatError("label count != frame count")


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    target_variance: float = TARGET_VARIANCE

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise DomainError("normalization std must be strictly positive")


def bark(freq_hz) -> np.ndarray:
    f = np.asarray(freq_hz, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


# ---------------------------------------------------------------------------
# framing and spectra


def frame_signal(clip: AudioClip, window_ms: float = 23.0, hop_fraction: float = 0.5):
    """Cut into windows of round(window_ms * rate / 1000) samples with hop
    floor(W * hop_fraction); each window is DC-removed then Hanning
    weighted. Returns (n_frames, W)."""
    w = int(round(window_ms * clip.sample_rate / 1000.0))
    hop = int(np.floor(w * hop_fraction))
    n = clip.samples.size
    if n < w:
        raise DataFormatError(f"clip of {n} samples shorter than one {w}-sample window")
    n_frames = (n - w) // hop + 1
    window = np.hanning(w)
    out = np.empty((n_frames, w))
    for t in range(n_frames):
        seg = clip.samples[t * hop:t * hop + w]
        out[t] = (seg - seg.mean()) * window
    return out


def next_pow2(n: int) -> int:
    f = 1
    while f < n:
        f *= 2
    return f


def power_spectrum(frame: np.ndarray) -> np.ndarray:
    """One-sided power spectrum |X_k|^2 for k = 0..F/2, F = next power of
    two >= frame length (zero padded)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise DataFormatError("empty frame")
    f = next_pow2(frame.size)
    spec = np.fft.rfft(frame, f)
    return np.abs(spec) ** 2


def build_filterbank(sample_rate: int, fft_size: int, n_filters: int = N_COEFFS) -> FilterBank:
    """Raised-cosine filters in the Bark domain at centers 1..n_filters
    Bark, each spanning +-1 Bark, sampled at the DFT bin frequencies."""
    if fft_size & (fft_size - 1) or fft_size <= 0:
        raise DomainError(f"fft_size {fft_size} is not a power of two")
    centers = np.arange(1, n_filters + 1, dtype=np.float64)
    nyquist_bark = float(bark(sample_rate / 2.0))
    if nyquist_bark < centers[-1]:
        raise DomainError(
            f"sample rate {sample_rate} Hz reaches only {nyquist_bark:.2f} Bark; "
            f"filter {n_filters} needs {centers[-1]:.0f}"
        )
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    bin_barks = bark(bin_freqs)
    dist = np.abs(bin_barks[np.newaxis, :] - centers[:, np.newaxis])
    responses = np.where(dist < 1.0, 0.5 * (1.0 + np.cos(np.pi * dist)), 0.0)
    if np.any(responses.sum(axis=1) <= 0):
        raise DomainError("a filter has no positive weight; fft_size too small")
    return FilterBank(responses, centers, sample_rate, fft_size)


def lhcb_frame(power: np.ndarray, bank: FilterBank, floor: float = LOG_FLOOR) -> np.ndarray:
    """coefficient_j = ln(max(sum_k response_j[k] * power[k], floor))."""
    if power.shape[0] != bank.responses.shape[1]:
        raise ShapeError(f"power bins {power.shape[0]} != filter bins {bank.responses.shape[1]}")
    return np.log(np.maximum(bank.responses @ power, floor))


def extract_feature_matrix(clip: AudioClip, labels, utterance_id: str = "",
                           window_ms: float = 23.0) -> FeatureMatrix:
    """Full per-utterance pipeline: framing, power spectra, LHCB coefficients."""
    frames = frame_signal(clip, window_ms)
    fft_size = next_pow2(frames.shape[1])
    bank = build_filterbank(clip.sample_rate, fft_size)
    coeffs = np.empty((frames.shape[0], N_COEFFS))
    for t in range(frames.shape[0]):
        coeffs[t] = lhcb_frame(power_spectrum(frames[t]), bank)
    return FeatureMatrix(coeffs, labels, utterance_id)


# ---------------------------------------------------------------------------
# normalization


def fit_norm_stats(training: list[FeatureMatrix]) -> NormStats:
    """Per-coefficient mean/std over all training frames. Frames from the
    dev/eval splits must never be passed in."""
    if not training:
        raise DataFormatError("empty training set")
    stacked = np.concatenate([fm.frames for fm in training], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise DataFormatError(f"degenerate feature: coefficient {bad[0]} has zero variance")
    return NormStats(mean, std)


def normalize(fm: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    """y = (x - mean) / std * sqrt(target_variance): mean 0, variance 0.5
    on the fitting data."""
    scaled = (fm.frames - stats.mean) / stats.std * np.sqrt(stats.target_variance)
    return FeatureMatrix(scaled, fm.labels, fm.utterance_id)


# ---------------------------------------------------------------------------
# context windowing


def context_window(fm: FeatureMatrix, width: int):
    """One 18 x width patch per labeled frame, center-aligned (for even
    width the center sits at width/2 - 1); utterance edges are
    replicate-padded so the patch count equals the frame count.
    Returns (patches (n, 18, width), labels)."""
    if width < 1:
        raise DomainError(f"context width must be >= 1, got {width}")
    n = len(fm.frames)
    center = (width - 1) // 2
    idx = np.clip(np.arange(n)[:, np.newaxis] - center + np.arange(width)[np.newaxis, :], 0, n - 1)
    patches = fm.frames[idx]                     # (n, width, 18)
    return np.ascontiguousarray(patches.transpose(0, 2, 1)), fm.labels.copy()


# ---------------------------------------------------------------------------
# file ingestion


def load_wav(path: str) -> AudioClip:
    """16-bit PCM mono RIFF WAV -> samples scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise DataFormatError(f"{path}: expected 16-bit PCM")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def load_label_csv(path: str, n_frames: int) -> np.ndarray:
    """Per-utterance `frame_index,label_index` CSV -> labels aligned to
    frames; -1 marks unlabeled frames."""
    labels = np.full(n_frames, -1, dtype=np.int64)
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                frame_index, label = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad label row {row!r}") from exc
            if not 0 <= label <= 29:
                raise DataFormatError(f"{path}:{lineno}: label {label} outside [0, 29]")
            if 0 <= frame_index < n_frames:
                labels[frame_index] = label
    return labels


def extract_directory(wav_dir: str, label_dir: str, width: int,
                      window_ms: float = 23.0) -> FrameDataset:
    """Extract every WAV in wav_dir (labels looked up by stem in
    label_dir), window with the given context width, and pool into one
    dataset. Speaker ids are assigned by sorted utterance order."""
    wavs = sorted(Path(wav_dir).glob("*.wav"))
    if not wavs:
        raise DataFormatError(f"no input files in {wav_dir}")
    all_patches, all_labels, all_speakers = [], [], []
    for speaker, wav_path in enumerate(wavs):
        label_path = Path(label_dir) / (wav_path.stem + ".csv")
        if not label_path.exists():
            raise DataFormatError(f"missing label file {label_path}")
        clip = load_wav(wav_path)
        n_frames = (clip.samples.size - int(round(window_ms * clip.sample_rate / 1000.0))) \
            // int(np.floor(round(window_ms * clip.sample_rate / 1000.0) * 0.5)) + 1
        labels = load_label_csv(str(label_path), n_frames)
        fm = extract_feature_matrix(clip, np.maximum(labels, 0), wav_path.stem, window_ms)
        patches, plabels = context_window(fm, width) if width > 0 else (fm.frames, fm.labels)
        keep = labels >= 0
        all_patches.append(patches[keep])
        all_labels.append(plabels[keep])
        all_speakers.append(np.full(int(keep.sum()), speaker, dtype=np.int64))
    return FrameDataset(np.concatenate(all_patches), np.concatenate(all_labels),
                        np.concatenate(all_speakers))
