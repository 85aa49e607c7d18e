"""Raw multimodal recordings to fixed-shape network input streams.

Pipeline: resample to 2 kHz, trim segment boundaries (training data only),
z-score per channel with training statistics, slide 400-sample windows at
stride 20 (200 ms / 10 ms at 2 kHz), compute per-channel time-domain
features, and assemble the three input maps: semg 6x12, acc 18x12 and
their vertical concatenation 24x12.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

TARGET_RATE = 2000
SEMG_CHANNELS = 12
ACC_CHANNELS = 36
WINDOW_LENGTH = 400
WINDOW_STRIDE = 20
TRIM_FRACTION = 0.10
ZC_EPS = 1e-4

SEMG_FEATURE_NAMES = ("IEMG", "WL", "VAR", "ZC", "SSC", "WAMP")
ACC_FEATURE_NAMES = ("MEAN", "VAR", "RMS", "WL", "MAV", "MAVS")

CACHE_MAGIC = b"FSCACHE1"


class SignalError(ValueError):
    pass


@dataclass
class Segment:
    """One contiguous recording chunk: (channels, samples) at 2 kHz."""

    data: np.ndarray
    label: int
    repetition: int
    subject: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise SignalError("segment data must be (channels, samples)")

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class Window:
    data: np.ndarray  # (channels, WINDOW_LENGTH)
    label: int
    trial: int
    subject: int = 0


@dataclass
class FeatureStreams:
    """The three network inputs for one window."""

    semg_map: np.ndarray   # 6x12
    acc_map: np.ndarray    # 18x12
    fused_map: np.ndarray  # 24x12


@dataclass
class NormStats:
    mean: np.ndarray  # per channel
    std: np.ndarray   # per channel, zero variance replaced by 1


@dataclass
class FeatureDataset:
    """Assembled per-window feature streams with labels and trial ids."""

    semg: np.ndarray    # (n, 6, 12)
    acc: np.ndarray     # (n, 18, 12)
    fused: np.ndarray   # (n, 24, 12)
    labels: np.ndarray  # (n,) class indices
    trials: np.ndarray  # (n,) repetition ids
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "FeatureDataset":
        idx = np.asarray(indices)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return FeatureDataset(self.semg[idx], self.acc[idx], self.fused[idx],
                              self.labels[idx], self.trials[idx], self.num_classes)

    @staticmethod
    def concatenate(sets: list["FeatureDataset"]) -> "FeatureDataset":
        if not sets:
            raise SignalError("cannot concatenate zero datasets")
        k = sets[0].num_classes
        if any(s.num_classes != k for s in sets):
            raise SignalError("datasets disagree on class count")
        return FeatureDataset(
            np.concatenate([s.semg for s in sets]),
            np.concatenate([s.acc for s in sets]),
            np.concatenate([s.fused for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.trials for s in sets]),
            k,
        )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resample_to_2khz(series: np.ndarray, native_rate: float) -> np.ndarray:
    """Linear interpolation onto the 2 kHz grid, along the last axis."""
    if not 0 < native_rate <= TARGET_RATE:
        raise SignalError(f"native rate {native_rate} not in (0, {TARGET_RATE}]")
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[-1]
    if n == 0:
        raise SignalError("empty series")
    duration = n / native_rate
    m = int(np.ceil(duration * TARGET_RATE))
    t_out = np.arange(m) / TARGET_RATE
    t_in = np.arange(n) / native_rate
    if series.ndim == 1:
        return np.interp(t_out, t_in, series)
    return np.stack([np.interp(t_out, t_in, row) for row in series])


def trim_boundaries(seg: Segment, fraction: float = TRIM_FRACTION) -> Segment:
    """Drop floor(fraction * length) samples from each end of the segment."""
    n = seg.num_samples
    k = int(np.floor(fraction * n))
    if n - 2 * k <= 0:
        raise SignalError(f"segment of {n} samples too short to trim {k} per end")
    return Segment(seg.data[:, k:n - k], seg.label, seg.repetition, seg.subject)


def fit_norm(segments: list[Segment]) -> NormStats:
    """Per-channel mean and std over all training samples."""
    if not segments:
        raise SignalError("no segments to fit normalization on")
    data = np.concatenate([s.data for s in segments], axis=1)
    mean = data.mean(axis=1)
    std = data.std(axis=1)
    std[std == 0] = 1.0
    return NormStats(mean, std)


def apply_norm(stats: NormStats, data: np.ndarray) -> np.ndarray:
    return (data - stats.mean[:, None]) / stats.std[:, None]


def slide_windows(seg: Segment, length: int = WINDOW_LENGTH,
                  stride: int = WINDOW_STRIDE) -> list[Window]:
    """All fully contained windows; count = floor((N - length)/stride) + 1."""
    n = seg.num_samples
    if n < length:
        return []
    starts = range(0, n - length + 1, stride)
    return [Window(seg.data[:, s:s + length], seg.label, seg.repetition, seg.subject)
            for s in starts]


# ---------------------------------------------------------------------------
# Per-channel features (x: (channels, samples))
# ---------------------------------------------------------------------------

def _iemg(x):
    return np.abs(x).sum(axis=1)


def _mav(x):
    return np.abs(x).mean(axis=1)


def _wl(x):
    return np.abs(np.diff(x, axis=1)).sum(axis=1)


def _rms(x):
    return np.sqrt((x ** 2).mean(axis=1))


def _mean(x):
    return x.mean(axis=1)


def _var(x):
    return x.var(axis=1, ddof=1)


def _zc(x, eps):
    sign_flip = x[:, :-1] * x[:, 1:] < 0
    big_step = np.abs(x[:, :-1] - x[:, 1:]) >= eps
    return (sign_flip & big_step).sum(axis=1).astype(np.float64)


def _ssc(x, eps):
    left = x[:, 1:-1] - x[:, :-2]
    right = x[:, 1:-1] - x[:, 2:]
    turn = left * right > 0
    big = np.maximum(np.abs(left), np.abs(right)) >= eps
    return (turn & big).sum(axis=1).astype(np.float64)


def _wamp(x, eps):
    return (np.abs(np.diff(x, axis=1)) >= eps).sum(axis=1).astype(np.float64)


def _mavs(x):
    half = x.shape[1] // 2
    return _mav(x[:, half:]) - _mav(x[:, :half])


def reshape_acc(feat: np.ndarray) -> np.ndarray:
    """Row-major 6x36 -> 18x12: each feature row of 36 becomes 3 rows of 12."""
    if feat.shape != (6, ACC_CHANNELS):
        raise SignalError(f"expected (6, {ACC_CHANNELS}) ACC features, got {feat.shape}")
    return feat.reshape(18, 12)


def unreshape_acc(grid: np.ndarray) -> np.ndarray:
    if grid.shape != (18, 12):
        raise SignalError(f"expected (18, 12) grid, got {grid.shape}")
    return grid.reshape(6, ACC_CHANNELS)


def extract_features(w: Window, eps: float = ZC_EPS) -> FeatureStreams:
    """Time-domain feature maps for one window of 12 sEMG + 36 ACC channels."""
    if w.data.shape[0] != SEMG_CHANNELS + ACC_CHANNELS:
        raise SignalError(f"expected {SEMG_CHANNELS + ACC_CHANNELS} channels, got {w.data.shape[0]}")
    if w.data.shape[1] != WINDOW_LENGTH:
        raise SignalError(f"expected {WINDOW_LENGTH} samples, got {w.data.shape[1]}")
    semg = w.data[:SEMG_CHANNELS]
    acc = w.data[SEMG_CHANNELS:]

    semg_map = np.stack([
        _iemg(semg), _wl(semg), _var(semg),
        _zc(semg, eps), _ssc(semg, eps), _wamp(semg, eps),
    ])
    acc_feat = np.stack([
        _mean(acc), _var(acc), _rms(acc), _wl(acc), _mav(acc), _mavs(acc),
    ])
    acc_map = reshape_acc(acc_feat)
    fused = np.vstack([semg_map, acc_map])
    return FeatureStreams(semg_map, acc_map, fused)


def assemble_streams(windows: list[Window], num_classes: int,
                     eps: float = ZC_EPS) -> FeatureDataset:
    """One (FeatureStreams, label) record per window, stacked into arrays."""
    streams = [extract_features(w, eps) for w in windows]
    n = len(windows)
    return FeatureDataset(
        semg=np.stack([s.semg_map for s in streams]) if n else np.zeros((0, 6, 12)),
        acc=np.stack([s.acc_map for s in streams]) if n else np.zeros((0, 18, 12)),
        fused=np.stack([s.fused_map for s in streams]) if n else np.zeros((0, 24, 12)),
        labels=np.array([w.label for w in windows], dtype=np.int64),
        trials=np.array([w.trial for w in windows], dtype=np.int64),
        num_classes=num_classes,
    )


def fit_row_scale(ds: FeatureDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of each fused-map row over a training set.

    Raw time-domain features span several orders of magnitude (sums and
    counts over 400 samples versus means), so networks standardise their
    inputs with these statistics.  Constant rows keep std 1.
    """
    mean = ds.fused.mean(axis=(0, 2))
    std = ds.fused.std(axis=(0, 2))
    std[std < 1e-12] = 1.0
    return mean, std


def prepare_streams(train_segments: list[Segment], test_segments: list[Segment],
                    label_to_class: dict[int, int],
                    trim_fraction: float = TRIM_FRACTION) -> tuple[FeatureDataset, FeatureDataset, NormStats]:
    """Full preprocessing for one dataset split.

    Training segments are boundary-trimmed, then normalization is fitted on
    them alone and applied to both splits before windowing and feature
    extraction.  Labels are remapped through ``label_to_class``.
    """
    num_classes = len(label_to_class)

    def windows_for(segments, trim):
        out = []
        for seg in segments:
            s = trim_boundaries(seg, trim_fraction) if trim else seg
            s = Segment(apply_norm(stats, s.data), label_to_class[s.label],
                        s.repetition, s.subject)
            out.extend(slide_windows(s))
        return out

    trimmed = [trim_boundaries(s, trim_fraction) for s in train_segments]
    stats = fit_norm(trimmed)
    train = assemble_streams(windows_for(train_segments, trim=True), num_classes)
    test = assemble_streams(windows_for(test_segments, trim=False), num_classes)
    return train, test, stats


# ---------------------------------------------------------------------------
# Feature cache file
# ---------------------------------------------------------------------------

def save_feature_cache(path, ds: FeatureDataset, meta: dict | None = None):
    """Versioned binary cache: header json, then per-window records."""
    header = {
        "version": 1,
        "num_records": len(ds),
        "num_classes": ds.num_classes,
        "semg_shape": [6, 12],
        "acc_shape": [18, 12],
        "fused_shape": [24, 12],
    }
    if meta:
        header.update(meta)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for i in range(len(ds)):
            f.write(struct.pack("<ii", int(ds.labels[i]), int(ds.trials[i])))
            f.write(np.ascontiguousarray(ds.fused[i]).tobytes())


def load_feature_cache(path) -> tuple[FeatureDataset, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise SignalError(f"{path}: not a feature cache file")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        n = header["num_records"]
        rows, cols = header["fused_shape"]
        labels = np.empty(n, dtype=np.int64)
        trials = np.empty(n, dtype=np.int64)
        fused = np.empty((n, rows, cols))
        record = rows * cols * 8
        for i in range(n):
            labels[i], trials[i] = struct.unpack("<ii", f.read(8))
            fused[i] = np.frombuffer(f.read(record), dtype=np.float64).reshape(rows, cols)
    ds = FeatureDataset(fused[:, :6, :].copy(), fused[:, 6:, :].copy(), fused,
                        labels, trials, header["num_classes"])
    return ds, header
