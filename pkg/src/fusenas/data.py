"""Dataset container, CSV adapter, trial-based splitting, synthetic generator.

The canonical on-disk form is a CSV with header
``sample,emg_0..emg_11,acc_0..acc_35,stimulus,repetition`` sampled at 2 kHz.
Contiguous runs of equal (stimulus, repetition) become Segments; stimulus 0
is the rest posture and is excluded from classification targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .signal import ACC_CHANNELS, SEMG_CHANNELS, Segment

TOTAL_CHANNELS = SEMG_CHANNELS + ACC_CHANNELS
CSV_HEADER = (["sample"]
              + [f"emg_{i}" for i in range(SEMG_CHANNELS)]
              + [f"acc_{i}" for i in range(ACC_CHANNELS)]
              + ["stimulus", "repetition"])

VALID_REPETITIONS = frozenset(range(1, 7))


class DataError(ValueError):
    pass


@dataclass
class RecordingSet:
    """All segments of one dataset, rest runs included."""

    segments: list[Segment]

    @property
    def movement_labels(self) -> list[int]:
        return sorted({s.label for s in self.segments if s.label != 0})

    @property
    def num_classes(self) -> int:
        return len(self.movement_labels)

    def label_to_class(self) -> dict[int, int]:
        return {lab: i for i, lab in enumerate(self.movement_labels)}


@dataclass(frozen=True)
class SplitSpec:
    train_repetitions: frozenset = frozenset({1, 3, 4, 6})
    test_repetitions: frozenset = frozenset({2, 5})

    def __post_init__(self):
        if self.train_repetitions & self.test_repetitions:
            raise DataError("train and test repetitions overlap")
        if not (self.train_repetitions | self.test_repetitions) <= VALID_REPETITIONS:
            raise DataError("repetition ids must lie in 1..6")


@dataclass
class SyntheticSpec:
    """Per-class sinusoid mixtures with per-channel phase and amplitude."""

    num_classes: int = 5
    repetitions: int = 6
    segment_samples: int = 1200
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if not 1 <= self.repetitions <= 6:
            raise DataError("repetitions must lie in 1..6")


def ingest_csv(path) -> RecordingSet:
    """Parse the canonical CSV into contiguous (stimulus, repetition) segments."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            missing = [c for c in CSV_HEADER if c not in header]
            raise DataError(f"{path}: bad header, missing columns {missing}" if missing
                            else f"{path}: bad header order")

        segments = []
        run_rows: list[list[float]] = []
        run_key = None
        prev_sample = None

        def flush():
            if run_rows:
                data = np.array(run_rows, dtype=np.float64).T  # (channels, samples)
                segments.append(Segment(data, run_key[0], run_key[1]))

        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}: row {row_num} has {len(row)} cells, "
                                f"expected {len(CSV_HEADER)}")
            values = []
            for col, cell in zip(CSV_HEADER, row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell at row {row_num}, "
                                    f"column {col}: {cell!r}") from None
            sample = int(values[0])
            if prev_sample is not None and sample != prev_sample + 1:
                raise DataError(f"{path}: non-contiguous sample index at row {row_num}: "
                                f"{prev_sample} -> {sample}")
            prev_sample = sample
            stimulus = int(values[-2])
            repetition = int(values[-1])
            key = (stimulus, repetition)
            if key != run_key:
                flush()
                run_rows = []
                run_key = key
            run_rows.append(values[1:1 + TOTAL_CHANNELS])
        flush()

    if not segments:
        raise DataError(f"{path}: no data rows")
    return RecordingSet(segments)


def export_csv(rs: RecordingSet, path):
    """Write segments back to the canonical CSV with 17 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        sample = 0
        for seg in rs.segments:
            for t in range(seg.num_samples):
                row = [sample] + [f"{v:.17g}" for v in seg.data[:, t]] + [seg.label, seg.repetition]
                writer.writerow(row)
                sample += 1


def split_by_trials(rs: RecordingSet, spec: SplitSpec | None = None
                    ) -> tuple[list[Segment], list[Segment]]:
    """Partition movement segments by repetition id; rest segments drop out."""
    spec = spec or SplitSpec()
    train, test = [], []
    for seg in rs.segments:
        if seg.repetition not in VALID_REPETITIONS:
            raise DataError(f"repetition id {seg.repetition} outside 1..6")
        if seg.label == 0:
            continue
        if seg.repetition in spec.train_repetitions:
            train.append(seg)
        elif seg.repetition in spec.test_repetitions:
            test.append(seg)
    return train, test


def synthesize(spec: SyntheticSpec) -> RecordingSet:
    """Deterministic multimodal toy recordings.

    Class c drives every channel with a_ch * sin(2*pi*f_ch*t + phase_ch);
    frequencies and amplitudes are drawn once per class from the seed, so
    repetitions of a class differ only in their noise realisation.
    """
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.segment_samples) / 2000.0
    class_params = []
    for _ in range(spec.num_classes):
        freqs = rng.uniform(20.0, 400.0, size=TOTAL_CHANNELS)
        amps = rng.uniform(0.2, 2.0, size=TOTAL_CHANNELS)
        phases = rng.uniform(0.0, 2 * np.pi, size=TOTAL_CHANNELS)
        class_params.append((freqs, amps, phases))

    segments = []
    for rep in range(1, spec.repetitions + 1):
        for cls in range(spec.num_classes):
            freqs, amps, phases = class_params[cls]
            clean = amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :]
                                           + phases[:, None])
            noise = spec.noise * rng.standard_normal((TOTAL_CHANNELS, spec.segment_samples))
            segments.append(Segment(clean + noise, cls + 1, rep))
    return RecordingSet(segments)
