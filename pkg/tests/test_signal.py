import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenas.signal import (ACC_CHANNELS, SEMG_CHANNELS, WINDOW_LENGTH,
                            WINDOW_STRIDE, FeatureDataset, Segment, SignalError,
                            Window, apply_norm, assemble_streams, extract_features,
                            fit_norm, load_feature_cache, prepare_streams,
                            reshape_acc, resample_to_2khz, save_feature_cache,
                            slide_windows, trim_boundaries, unreshape_acc)

TOTAL = SEMG_CHANNELS + ACC_CHANNELS


# ---------------------------------------------------------------------------
# Independent straight-line oracle for the feature definitions
# ---------------------------------------------------------------------------

def o_iemg(x):
    return sum(abs(v) for v in x)


def o_mav(x):
    return sum(abs(v) for v in x) / len(x)


def o_wl(x):
    return sum(abs(x[i + 1] - x[i]) for i in range(len(x) - 1))


def o_rms(x):
    return (sum(v * v for v in x) / len(x)) ** 0.5


def o_mean(x):
    return sum(x) / len(x)


def o_var(x):
    m = sum(x) / len(x)
    return sum((v - m) ** 2 for v in x) / (len(x) - 1)


def o_zc(x, eps):
    return sum(1 for i in range(len(x) - 1)
               if x[i] * x[i + 1] < 0 and abs(x[i] - x[i + 1]) >= eps)


def o_ssc(x, eps):
    return sum(1 for i in range(1, len(x) - 1)
               if (x[i] - x[i - 1]) * (x[i] - x[i + 1]) > 0
               and max(abs(x[i] - x[i - 1]), abs(x[i] - x[i + 1])) >= eps)


def o_wamp(x, eps):
    return sum(1 for i in range(len(x) - 1) if abs(x[i + 1] - x[i]) >= eps)


def o_mavs(x):
    h = len(x) // 2
    return o_mav(x[h:]) - o_mav(x[:h])


def oracle_streams(data, eps=1e-4):
    """Reference maps computed with plain python loops."""
    semg_rows = [o_iemg, o_wl, o_var,
                 lambda x: o_zc(x, eps), lambda x: o_ssc(x, eps),
                 lambda x: o_wamp(x, eps)]
    acc_rows = [o_mean, o_var, o_rms, o_wl, o_mav, o_mavs]

    semg_map = np.zeros((6, SEMG_CHANNELS))
    for r, fn in enumerate(semg_rows):
        for c in range(SEMG_CHANNELS):
            semg_map[r, c] = fn(list(data[c]))

    acc_map = np.zeros((18, 12))
    for f, fn in enumerate(acc_rows):
        for ch in range(ACC_CHANNELS):
            # element (f, ch) of the 6x36 grid lands at row 3f + ch//12, col ch%12
            acc_map[3 * f + ch // 12, ch % 12] = fn(list(data[SEMG_CHANNELS + ch]))
    fused = np.vstack([semg_map, acc_map])
    return semg_map, acc_map, fused


def make_window(rng, scale=1.0):
    return Window(scale * rng.standard_normal((TOTAL, WINDOW_LENGTH)), label=0, trial=1)


class TestResample:
    def test_identity_at_2khz(self):
        x = np.random.default_rng(0).standard_normal(500)
        assert np.array_equal(resample_to_2khz(x, 2000), x)

    def test_constant_series(self):
        y = resample_to_2khz(np.full(37, 3.25), 148)
        assert np.allclose(y, 3.25)
        assert len(y) == int(np.ceil(37 / 148 * 2000))

    def test_ramp_is_preserved(self):
        n = 149
        x = np.linspace(0.0, 1.0, n)
        y = resample_to_2khz(x, 148)
        # linear interpolation reproduces a linear ramp exactly on the grid
        t_out = np.arange(len(y)) / 2000
        t_in = np.arange(n) / 148
        expected = np.clip(t_out, None, t_in[-1]) / t_in[-1]
        assert np.allclose(y, expected, atol=1e-12)

    def test_empty_series(self):
        with pytest.raises(SignalError):
            resample_to_2khz(np.array([]), 148)

    def test_rate_above_target_rejected(self):
        with pytest.raises(SignalError):
            resample_to_2khz(np.ones(10), 4000)

    def test_multichannel(self):
        x = np.random.default_rng(1).standard_normal((3, 74))
        y = resample_to_2khz(x, 148)
        assert y.shape[0] == 3
        assert y.shape[1] == int(np.ceil(74 / 148 * 2000))


class TestTrim:
    def test_ten_thousand(self):
        seg = Segment(np.zeros((2, 10_000)), 1, 1)
        assert trim_boundaries(seg, 0.10).num_samples == 8000

    def test_fraction_zero_identity(self):
        seg = Segment(np.arange(20.0).reshape(2, 10), 1, 1)
        out = trim_boundaries(seg, 0.0)
        assert np.array_equal(out.data, seg.data)

    def test_ten_samples(self):
        seg = Segment(np.arange(10.0)[None, :], 1, 1)
        out = trim_boundaries(seg, 0.10)
        assert out.num_samples == 8
        assert out.data[0, 0] == 1.0 and out.data[0, -1] == 8.0

    def test_too_short(self):
        seg = Segment(np.zeros((1, 4)), 1, 1)
        with pytest.raises(SignalError):
            trim_boundaries(seg, 0.5)


class TestNormalization:
    def test_train_stats_are_zero_one(self):
        rng = np.random.default_rng(2)
        segs = [Segment(5 + 3 * rng.standard_normal((4, 800)), 1, 1) for _ in range(3)]
        stats = fit_norm(segs)
        z = np.concatenate([apply_norm(stats, s.data) for s in segs], axis=1)
        assert np.allclose(z.mean(axis=1), 0.0, atol=1e-9)
        assert np.allclose(z.std(axis=1), 1.0, atol=1e-9)

    def test_constant_channel_maps_to_zero(self):
        segs = [Segment(np.full((2, 100), 7.0), 1, 1)]
        stats = fit_norm(segs)
        assert np.allclose(apply_norm(stats, segs[0].data), 0.0)

    def test_test_data_uses_train_stats(self):
        rng = np.random.default_rng(3)
        train = [Segment(rng.standard_normal((2, 500)), 1, 1)]
        stats = fit_norm(train)
        shifted = 10.0 + rng.standard_normal((2, 500))
        z = apply_norm(stats, shifted)
        # shift survives because the statistics come from the training data
        assert z.mean() > 5.0


class TestWindows:
    @pytest.mark.parametrize("n,expected", [(399, 0), (400, 1), (401, 1), (10_000, 481)])
    def test_count_law(self, n, expected):
        seg = Segment(np.zeros((1, n)), 2, 1)
        assert len(slide_windows(seg)) == expected
        # independent enumeration oracle
        starts = [s for s in range(0, n) if s + WINDOW_LENGTH <= n and s % WINDOW_STRIDE == 0]
        assert len(starts) == expected

    def test_labels_and_bounds(self):
        seg = Segment(np.arange(500.0)[None, :], 9, 4)
        windows = slide_windows(seg)
        assert all(w.label == 9 and w.trial == 4 for w in windows)
        assert np.array_equal(windows[1].data[0], np.arange(20.0, 420.0))


class TestFeatures:
    def test_zero_window_gives_zero_maps(self):
        w = Window(np.zeros((TOTAL, WINDOW_LENGTH)), 0, 1)
        fs = extract_features(w)
        assert not fs.semg_map.any()
        assert not fs.acc_map.any()
        assert not fs.fused_map.any()

    def test_hand_example(self):
        x = [1.0, -2.0, 3.0, -4.0]
        assert o_iemg(x) == 10
        assert o_wl(x) == 15
        assert o_zc(x, 0.0) == 3

    def test_shapes(self):
        fs = extract_features(make_window(np.random.default_rng(4)))
        assert fs.semg_map.shape == (6, 12)
        assert fs.acc_map.shape == (18, 12)
        assert fs.fused_map.shape == (24, 12)

    def test_fused_rows_mirror_parts(self):
        fs = extract_features(make_window(np.random.default_rng(5)))
        assert np.array_equal(fs.fused_map[:6], fs.semg_map)
        assert np.array_equal(fs.fused_map[6:], fs.acc_map)

    def test_against_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            w = make_window(rng)
            fs = extract_features(w)
            semg, acc, fused = oracle_streams(w.data)
            assert np.allclose(fs.semg_map, semg, rtol=1e-9, atol=1e-12)
            assert np.allclose(fs.acc_map, acc, rtol=1e-9, atol=1e-12)
            assert np.allclose(fs.fused_map, fused, rtol=1e-9, atol=1e-12)

    def test_amplitude_features_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            fs = extract_features(make_window(rng))
            assert (fs.semg_map >= 0).all()  # IEMG WL VAR ZC SSC WAMP

    @given(st.floats(0.1, 50.0), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_scaling_laws(self, c, seed):
        rng = np.random.default_rng(seed)
        base = make_window(rng)
        scaled = Window(c * base.data, base.label, base.trial)
        f0 = extract_features(base, eps=0.0)
        f1 = extract_features(scaled, eps=0.0)
        semg_ch = base.data[:SEMG_CHANNELS]
        # linear: IEMG and WL rows of the semg map
        assert np.allclose(f1.semg_map[0], c * f0.semg_map[0], rtol=1e-9)
        assert np.allclose(f1.semg_map[1], c * f0.semg_map[1], rtol=1e-9)
        # quadratic: VAR row
        assert np.allclose(f1.semg_map[2], c * c * f0.semg_map[2], rtol=1e-9)
        # scale-invariant at eps=0: ZC row
        assert np.array_equal(f1.semg_map[3], f0.semg_map[3])

    def test_acc_scaling_rows(self):
        rng = np.random.default_rng(8)
        base = make_window(rng)
        c = 3.0
        f0 = extract_features(base)
        f1 = extract_features(Window(c * base.data, 0, 1))
        acc0, acc1 = unreshape_acc(f0.acc_map), unreshape_acc(f1.acc_map)
        for row, power in zip(range(6), (1, 2, 1, 1, 1, 1)):  # MEAN VAR RMS WL MAV MAVS
            assert np.allclose(acc1[row], (c ** power) * acc0[row], rtol=1e-9)

    def test_reshape_bijection(self):
        rng = np.random.default_rng(9)
        feat = rng.standard_normal((6, 36))
        assert np.array_equal(unreshape_acc(reshape_acc(feat)), feat)

    def test_wrong_channel_count(self):
        with pytest.raises(SignalError):
            extract_features(Window(np.zeros((10, WINDOW_LENGTH)), 0, 1))

    def test_wrong_length(self):
        with pytest.raises(SignalError):
            extract_features(Window(np.zeros((TOTAL, 300)), 0, 1))


class TestAssemble:
    def test_record_per_window(self):
        rng = np.random.default_rng(10)
        windows = [make_window(rng) for _ in range(7)]
        for i, w in enumerate(windows):
            w.label = i % 3
        ds = assemble_streams(windows, num_classes=3)
        assert len(ds) == 7
        assert ds.fused.shape == (7, 24, 12)
        assert list(ds.labels) == [i % 3 for i in range(7)]

    def test_oracle_agreement_bulk(self):
        rng = np.random.default_rng(11)
        windows = [make_window(rng) for _ in range(25)]
        ds = assemble_streams(windows, num_classes=1)
        for i, w in enumerate(windows):
            _, _, fused = oracle_streams(w.data)
            assert np.allclose(ds.fused[i], fused, rtol=1e-9, atol=1e-12)

    def test_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        windows = [make_window(rng) for _ in range(9)]
        for i, w in enumerate(windows):
            w.label, w.trial = i % 2, 1 + i % 6
        ds = assemble_streams(windows, num_classes=2)
        path = tmp_path / "f.fcache"
        save_feature_cache(path, ds, meta={"config_hash": "abc", "seed": 3})
        loaded, header = load_feature_cache(path)
        assert header["config_hash"] == "abc" and header["seed"] == 3
        assert np.array_equal(loaded.fused, ds.fused)
        assert np.array_equal(loaded.semg, ds.semg)
        assert np.array_equal(loaded.acc, ds.acc)
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.array_equal(loaded.trials, ds.trials)

    def test_cache_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACACHExxxx")
        with pytest.raises(SignalError):
            load_feature_cache(path)


class TestPrepare:
    def test_pipeline_shapes_and_split(self):
        rng = np.random.default_rng(13)
        train = [Segment(rng.standard_normal((TOTAL, 900)), lab, rep)
                 for lab in (1, 2) for rep in (1, 3)]
        test = [Segment(rng.standard_normal((TOTAL, 900)), lab, 2) for lab in (1, 2)]
        tr, te, stats = prepare_streams(train, test, {1: 0, 2: 1})
        # train segments are trimmed to 720 samples -> 17 windows each
        assert len(tr) == 4 * ((720 - 400) // 20 + 1)
        # test segments stay at 900 samples -> 26 windows each
        assert len(te) == 2 * ((900 - 400) // 20 + 1)
        assert set(tr.labels) == {0, 1}
        assert stats.mean.shape == (TOTAL,)
