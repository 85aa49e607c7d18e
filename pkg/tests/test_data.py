import numpy as np
import pytest

from fusenas.data import (CSV_HEADER, DataError, RecordingSet, SplitSpec,
                          SyntheticSpec, export_csv, ingest_csv, split_by_trials,
                          synthesize)
from fusenas.signal import Segment

TOTAL = 48


def write_toy_csv(path, runs):
    """runs: list of (stimulus, repetition, num_samples); values are synthetic."""
    lines = [",".join(CSV_HEADER)]
    sample = 0
    for stim, rep, n in runs:
        for _ in range(n):
            vals = [str(sample)] + [f"{0.001 * sample + c:.6g}" for c in range(TOTAL)]
            vals += [str(stim), str(rep)]
            lines.append(",".join(vals))
            sample += 1
    path.write_text("\n".join(lines) + "\n")


class TestIngest:
    def test_toy_file_segments(self, tmp_path):
        # 2 gestures x 2 repetitions with interleaved rest
        runs = [(0, 1, 5), (1, 1, 10), (0, 1, 5), (2, 1, 10),
                (0, 2, 5), (1, 2, 10), (0, 2, 5), (2, 2, 10)]
        path = tmp_path / "toy.csv"
        write_toy_csv(path, runs)
        rs = ingest_csv(path)
        movement = [s for s in rs.segments if s.label != 0]
        rest = [s for s in rs.segments if s.label == 0]
        assert len(movement) == 4
        assert len(rest) == 4
        assert all(s.num_samples == 10 for s in movement)
        assert rs.movement_labels == [1, 2]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        header = [c for c in CSV_HEADER if c != "acc_35"]
        path.write_text(",".join(header) + "\n")
        with pytest.raises(DataError, match="acc_35"):
            ingest_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            ingest_csv(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "headeronly.csv"
        path.write_text(",".join(CSV_HEADER) + "\n")
        with pytest.raises(DataError, match="no data rows"):
            ingest_csv(path)

    def test_non_numeric_cell_reports_location(self, tmp_path):
        path = tmp_path / "cell.csv"
        write_toy_csv(path, [(1, 1, 3)])
        lines = path.read_text().splitlines()
        cells = lines[2].split(",")
        cells[1 + 13] = "oops"  # acc_1 on csv row 3
        lines[2] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"row 3.*acc_1"):
            ingest_csv(path)

    def test_non_contiguous_sample_index(self, tmp_path):
        path = tmp_path / "gap.csv"
        write_toy_csv(path, [(1, 1, 4)])
        lines = path.read_text().splitlines()
        cells = lines[3].split(",")
        cells[0] = "17"
        lines[3] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="non-contiguous"):
            ingest_csv(path)

    def test_round_trip_bit_exact(self, tmp_path):
        rs = synthesize(SyntheticSpec(num_classes=2, repetitions=2,
                                      segment_samples=50, noise=0.3, seed=5))
        out = tmp_path / "rt.csv"
        export_csv(rs, out)
        back = ingest_csv(out)
        assert len(back.segments) == len(rs.segments)
        for a, b in zip(rs.segments, back.segments):
            assert a.label == b.label and a.repetition == b.repetition
            assert np.array_equal(a.data, b.data)


class TestSplit:
    def make_set(self):
        segs = [Segment(np.zeros((TOTAL, 10)), lab, rep)
                for lab in (0, 1, 2) for rep in range(1, 7)]
        return RecordingSet(segs)

    def test_default_partition(self):
        train, test = split_by_trials(self.make_set())
        assert len(train) == 2 * 4  # 2 gestures x reps {1,3,4,6}
        assert len(test) == 2 * 2   # 2 gestures x reps {2,5}
        assert {s.repetition for s in train} == {1, 3, 4, 6}
        assert {s.repetition for s in test} == {2, 5}

    def test_rest_excluded(self):
        train, test = split_by_trials(self.make_set())
        assert all(s.label != 0 for s in train + test)

    def test_swapped_spec_mirrors(self):
        spec = SplitSpec(train_repetitions=frozenset({2, 5}),
                         test_repetitions=frozenset({1, 3, 4, 6}))
        train, test = split_by_trials(self.make_set(), spec)
        assert {s.repetition for s in train} == {2, 5}
        assert {s.repetition for s in test} == {1, 3, 4, 6}

    def test_no_segment_in_both(self):
        train, test = split_by_trials(self.make_set())
        train_ids = {id(s) for s in train}
        assert not train_ids & {id(s) for s in test}

    def test_bad_repetition_rejected(self):
        rs = RecordingSet([Segment(np.zeros((TOTAL, 10)), 1, 7)])
        with pytest.raises(DataError, match="repetition"):
            split_by_trials(rs)

    def test_overlapping_spec_rejected(self):
        with pytest.raises(DataError):
            SplitSpec(train_repetitions=frozenset({1, 2}), test_repetitions=frozenset({2, 5}))


class TestSynthesize:
    def test_deterministic(self):
        spec = SyntheticSpec(num_classes=3, segment_samples=400, seed=9)
        a, b = synthesize(spec), synthesize(spec)
        assert len(a.segments) == len(b.segments)
        for sa, sb in zip(a.segments, b.segments):
            assert np.array_equal(sa.data, sb.data)

    def test_zero_noise_repetitions_identical(self):
        spec = SyntheticSpec(num_classes=2, repetitions=3, segment_samples=300,
                             noise=0.0, seed=1)
        rs = synthesize(spec)
        by_class = {}
        for s in rs.segments:
            by_class.setdefault(s.label, []).append(s)
        for segs in by_class.values():
            assert len(segs) == 3
            assert all(np.array_equal(segs[0].data, s.data) for s in segs[1:])

    def test_classes_differ(self):
        rs = synthesize(SyntheticSpec(num_classes=2, repetitions=1,
                                      segment_samples=300, noise=0.0, seed=2))
        a, b = rs.segments
        assert not np.array_equal(a.data, b.data)

    def test_counts_and_channels(self):
        rs = synthesize(SyntheticSpec(num_classes=4, repetitions=6, segment_samples=250))
        assert len(rs.segments) == 24
        assert all(s.data.shape == (TOTAL, 250) for s in rs.segments)
        assert rs.num_classes == 4
        assert rs.label_to_class() == {1: 0, 2: 1, 3: 2, 4: 3}

    def test_spec_validation(self):
        with pytest.raises(DataError):
            SyntheticSpec(num_classes=1)
        with pytest.raises(DataError):
            SyntheticSpec(repetitions=9)
