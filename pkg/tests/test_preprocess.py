import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegpolicy import preprocess as pp
from eegpolicy.eeg_io import Channel, Recording, common_channel_names
from tests.conftest import smooth_scalp_recording


def tone(freq, fs=250.0, duration=8.0, n_ch=4, amplitude=1.0, phase=0.0):
    t = np.arange(int(duration * fs)) / fs
    x = amplitude * np.sin(2 * np.pi * freq * t + phase)
    return Recording(tuple(Channel(f"c{i}") for i in range(n_ch)), fs,
                     np.tile(x, (n_ch, 1)), "eyes_open", 1)


def rms(x):
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


class TestResample:
    def test_halving(self):
        rec = tone(10.0, fs=500.0, duration=2.0)
        out = pp.resample(rec, 250.0)
        assert out.sample_rate == 250.0
        assert out.n_samples == 500

    def test_identity_bit_equal(self):
        rec = tone(10.0)
        out = pp.resample(rec, 250.0)
        assert out.data.tobytes() == rec.data.tobytes()

    def test_sinusoid_tracks_analytic(self):
        # 10 Hz at 500 Hz downsampled must match the directly sampled wave
        rec = tone(10.0, fs=500.0, duration=4.0, n_ch=1)
        out = pp.resample(rec, 250.0)
        t = np.arange(out.n_samples) / 250.0
        target = np.sin(2 * np.pi * 10.0 * t)
        r = np.corrcoef(out.data[0], target)[0, 1]
        assert r > 0.999

    def test_floor_sample_count(self):
        rec = tone(5.0, fs=250.0, duration=4.004)  # 1001 samples
        out = pp.resample(rec, 125.0)
        assert out.n_samples == 500  # floor(1001/2)

    def test_upsampling_rejected(self):
        with pytest.raises(pp.UpsamplingError):
            pp.resample(tone(10.0), 500.0)

    def test_nonpositive_rate_rejected(self):
        with pytest.raises(pp.PreprocessError):
            pp.resample(tone(10.0), 0.0)

    def test_antialias_kills_above_target_nyquist(self):
        # 100 Hz tone is above the 62.5 Hz Nyquist of the 125 Hz target
        rec = tone(100.0, fs=500.0, duration=4.0)
        out = pp.resample(rec, 125.0)
        assert rms(out.data) < 0.05 * rms(rec.data)


class TestFilters:
    def test_notch_attenuation_30db(self):
        rec = tone(60.0)
        out = pp.apply_filters(rec)
        assert rms(out.data) <= 10 ** (-30 / 20) * rms(rec.data)

    def test_passband_within_1db(self):
        rec = tone(10.0)
        out = pp.apply_filters(rec)
        ratio = rms(out.data) / rms(rec.data)
        assert 10 ** (-1 / 20) <= ratio <= 10 ** (1 / 20)

    def test_dc_removed(self):
        rec = tone(10.0, amplitude=0.0)
        rec = rec.with_data(rec.data + 100.0)  # constant 100 uV
        out = pp.apply_filters(rec)
        assert abs(out.data.mean()) < 1.0

    def test_band_order_violations(self):
        rec = tone(10.0)
        with pytest.raises(pp.BandOrderError):
            pp.apply_filters(rec, high_pass=50.0, low_pass=1.0)
        with pytest.raises(pp.BandOrderError):
            pp.apply_filters(rec, low_pass=200.0)  # beyond Nyquist
        with pytest.raises(pp.BandOrderError):
            pp.apply_filters(rec, notch=0.5)

    def test_shape_preserved(self):
        rec = tone(10.0, n_ch=3)
        out = pp.apply_filters(rec)
        assert out.data.shape == rec.data.shape

    @settings(max_examples=10, deadline=None)
    @given(freq=st.floats(5.0, 40.0))
    def test_passband_flat_property(self, freq):
        rec = tone(freq, duration=8.0, n_ch=1)
        out = pp.apply_filters(rec)
        ratio = rms(out.data) / rms(rec.data)
        assert 10 ** (-1 / 20) <= ratio <= 10 ** (1 / 20)


class TestBadChannels:
    def test_clean_recording_unflagged(self, scalp_recording):
        report = pp.detect_bad_channels(scalp_recording)
        assert report.flagged == frozenset()

    def test_deviation_flags_100x_channel(self, scalp_recording):
        data = np.array(scalp_recording.data)
        data[10] *= 100.0
        rec = scalp_recording.with_data(data)
        report = pp.detect_bad_channels(rec)
        name = rec.channel_names[10]
        assert name in report.flagged
        assert "deviation" in report.criteria[name]

    def test_correlation_flags_disconnected_channel(self, scalp_recording):
        rng = np.random.default_rng(42)
        data = np.array(scalp_recording.data)
        scale = data[20].std()
        data[20] = scale * rng.standard_normal(data.shape[1])
        rec = scalp_recording.with_data(data)
        report = pp.detect_bad_channels(rec)
        name = rec.channel_names[20]
        assert name in report.flagged
        assert "correlation" in report.criteria[name]

    def test_identical_copies_unflagged(self):
        rng = np.random.default_rng(0)
        base = np.cumsum(rng.standard_normal(2000))
        data = np.tile(base, (6, 1)) + 1e-3 * rng.standard_normal((6, 2000))
        rec = Recording(tuple(Channel(f"c{i}") for i in range(6)), 250.0,
                        data, "eyes_open", 1)
        report = pp.detect_bad_channels(rec)
        assert report.flagged == frozenset()

    def test_zero_variance_autoflagged(self, scalp_recording):
        data = np.array(scalp_recording.data)
        data[5] = 3.14
        rec = scalp_recording.with_data(data)
        report = pp.detect_bad_channels(rec)
        name = rec.channel_names[5]
        assert "deviation" in report.criteria[name]

    def test_noisiness_flags_hf_channel(self, scalp_recording):
        rng = np.random.default_rng(7)
        data = np.array(scalp_recording.data)
        hf = rng.standard_normal(data.shape[1])
        hf = np.diff(hf, prepend=0.0)  # differencing pushes power to HF
        data[30] = data[30] + data[30].std() * 3.0 * hf / hf.std()
        rec = scalp_recording.with_data(data)
        report = pp.detect_bad_channels(rec)
        name = rec.channel_names[30]
        assert "noisiness" in report.criteria.get(name, ())

    def test_needs_four_channels(self):
        rec = tone(10.0, n_ch=3)
        with pytest.raises(pp.PreprocessError):
            pp.detect_bad_channels(rec)

    def test_channel_order_invariance(self, scalp_recording):
        data = np.array(scalp_recording.data)
        data[10] *= 100.0
        rec = scalp_recording.with_data(data)
        perm = np.random.default_rng(1).permutation(len(rec.channels))
        shuffled = Recording(tuple(rec.channels[i] for i in perm),
                             rec.sample_rate, rec.data[perm],
                             rec.condition, rec.block_index)
        a = pp.detect_bad_channels(rec)
        b = pp.detect_bad_channels(shuffled)
        assert a.flagged == b.flagged
        assert a.criteria == b.criteria
        for name in rec.channel_names:
            assert a.deviation[name] == pytest.approx(b.deviation[name])
            assert a.predictability[name] == pytest.approx(
                b.predictability[name], nan_ok=True)


class TestInterpolation:
    def test_no_flags_identity(self, scalp_recording):
        report = pp.detect_bad_channels(scalp_recording)
        out = pp.interpolate_bad_channels(scalp_recording, report)
        assert out is scalp_recording

    def test_corrupt_and_restore(self, scalp_recording):
        original = scalp_recording.data[10].copy()
        data = np.array(scalp_recording.data)
        data[10] = np.random.default_rng(0).standard_normal(data.shape[1]) * 1e4
        rec = scalp_recording.with_data(data)
        report = pp.detect_bad_channels(rec)
        name = rec.channel_names[10]
        assert name in report.flagged
        restored = pp.interpolate_bad_channels(rec, report)
        r = np.corrcoef(restored.data[10], original)[0, 1]
        assert r > 0.95
        # good channels untouched
        good = [i for i in range(len(rec.channels))
                if rec.channel_names[i] not in report.flagged]
        np.testing.assert_array_equal(restored.data[good], rec.data[good])

    def test_constant_field_reproduced(self, scalp_recording):
        # the spline's constant term makes flat fields exactly representable
        data = np.full_like(scalp_recording.data, 7.0)
        data[3] = 1e6  # corrupt one channel
        rec = scalp_recording.with_data(data)
        report = pp.BadChannelReport(
            {}, {}, {}, {}, frozenset({rec.channel_names[3]}),
            {rec.channel_names[3]: ("deviation",)})
        out = pp.interpolate_bad_channels(rec, report)
        np.testing.assert_allclose(out.data[3], 7.0, atol=1e-6)

    def test_all_flagged_is_error(self, scalp_recording):
        names = scalp_recording.channel_names
        report = pp.BadChannelReport(
            {}, {}, {}, {}, frozenset(names),
            {n: ("deviation",) for n in names})
        with pytest.raises(pp.AllChannelsBadError):
            pp.interpolate_bad_channels(scalp_recording, report)

    def test_missing_position_is_error(self):
        rec = tone(10.0, n_ch=4)  # channels carry no positions
        report = pp.BadChannelReport(
            {}, {}, {}, {}, frozenset({"c0"}), {"c0": ("deviation",)})
        with pytest.raises(pp.MissingPositionError):
            pp.interpolate_bad_channels(rec, report)


class TestEpochs:
    def test_two_minute_block(self):
        rec = tone(10.0, duration=120.0)
        es = pp.segment_epochs(rec, 2.0)
        assert es.epochs.shape == (60, 4, 500)
        assert es.keep_mask.all()

    def test_trailing_partial_dropped(self):
        rec = tone(10.0, duration=121.0)
        es = pp.segment_epochs(rec, 2.0)
        assert es.n_epochs == 60

    def test_partition_property(self):
        rec = tone(7.0, duration=10.0)
        es = pp.segment_epochs(rec, 2.0)
        rebuilt = es.epochs.transpose(1, 0, 2).reshape(4, -1)
        np.testing.assert_array_equal(rebuilt, rec.data[:, :rebuilt.shape[1]])

    def test_too_short_is_error(self):
        with pytest.raises(pp.PreprocessError):
            pp.segment_epochs(tone(10.0, duration=1.0), 2.0)

    def test_noninteger_epoch_length_is_error(self):
        with pytest.raises(pp.PreprocessError):
            pp.segment_epochs(tone(10.0, duration=8.0), 1.0001)


def gaussian_epochs(n_ep=50, n_ch=8, n_samp=100, seed=0):
    rng = np.random.default_rng(seed)
    epochs = rng.standard_normal((n_ep, n_ch, n_samp))
    return pp.EpochSet(epochs, tuple(f"c{i}" for i in range(n_ch)), 50.0,
                       "eyes_open", 1, np.ones(n_ep, dtype=bool))


class TestRejectEpochs:
    def test_planted_spikes_rejected(self):
        es = gaussian_epochs()
        epochs = np.array(es.epochs)
        clean_max = np.ptp(epochs, axis=2).max()
        for i in (4, 17, 31):
            epochs[i] *= 10.0
        spiked = pp.EpochSet(epochs, es.channel_names, 50.0, "eyes_open", 1,
                             np.ones(es.n_epochs, dtype=bool))
        grid = np.array([clean_max * 1.05, clean_max * 3.0, clean_max * 20.0])
        out = pp.reject_epochs(spiked, folds=5, threshold_grid=grid)
        rejected = set(np.nonzero(~out.keep_mask)[0].tolist())
        assert rejected == {4, 17, 31}
        assert out.per_channel_thresholds is not None

    def test_huge_threshold_rejects_nothing(self):
        es = gaussian_epochs()
        out = pp.reject_epochs(es, folds=5, threshold_grid=np.array([1e6]))
        assert out.keep_mask.all()

    def test_identical_epochs_tie_breaks_large(self):
        base = np.random.default_rng(3).standard_normal((1, 4, 50))
        epochs = np.repeat(base, 12, axis=0)
        es = pp.EpochSet(epochs, ("a", "b", "c", "d"), 25.0, "eyes_open", 1,
                         np.ones(12, dtype=bool))
        p = float(np.ptp(epochs, axis=2).max())
        grid = np.array([p, 2 * p, 4 * p])
        out = pp.reject_epochs(es, folds=3, threshold_grid=grid)
        assert out.keep_mask.all()
        np.testing.assert_array_equal(out.per_channel_thresholds,
                                      np.full(4, 4 * p))

    def test_deterministic_given_seed(self):
        es = gaussian_epochs(seed=5)
        a = pp.reject_epochs(es, folds=5, seed=11)
        b = pp.reject_epochs(es, folds=5, seed=11)
        np.testing.assert_array_equal(a.keep_mask, b.keep_mask)
        np.testing.assert_array_equal(a.per_channel_thresholds,
                                      b.per_channel_thresholds)

    def test_all_degenerate_grid_is_error(self):
        es = gaussian_epochs()
        with pytest.raises(pp.DegenerateGridError):
            pp.reject_epochs(es, folds=5, threshold_grid=np.array([1e-12]))

    def test_too_few_epochs(self):
        es = gaussian_epochs(n_ep=8)
        with pytest.raises(pp.PreprocessError):
            pp.reject_epochs(es, folds=5)


class TestRereference:
    def test_constant_offset_zeroed(self):
        es = gaussian_epochs(n_ep=4)
        shifted = pp.EpochSet(es.epochs + 5.0, es.channel_names, 50.0,
                              "eyes_open", 1, es.keep_mask)
        out = pp.rereference_common_average(shifted)
        assert np.abs(out.epochs.mean(axis=1)).max() < 1e-9

    def test_idempotent(self):
        es = gaussian_epochs(n_ep=4)
        once = pp.rereference_common_average(es)
        twice = pp.rereference_common_average(once)
        np.testing.assert_allclose(twice.epochs, once.epochs, atol=1e-12)

    def test_zero_channel_mean_subspace(self):
        es = gaussian_epochs(n_ep=6)
        out = pp.rereference_common_average(es)
        sums = out.epochs.sum(axis=1)
        assert np.abs(sums).max() < 1e-9 * es.epochs.shape[1]

    def test_needs_two_channels(self):
        es = gaussian_epochs(n_ch=1)
        with pytest.raises(pp.PreprocessError):
            pp.rereference_common_average(es)


class TestChannelSelection:
    def test_identity(self, scalp_recording):
        out = pp.select_common_channels(scalp_recording,
                                        scalp_recording.channel_names)
        np.testing.assert_array_equal(out.data, scalp_recording.data)

    def test_bundled_54_from_64(self, scalp_recording):
        wanted = common_channel_names()
        out = pp.select_common_channels(scalp_recording, wanted)
        assert out.channel_names == wanted
        assert out.data.shape[0] == 54

    def test_missing_channel_named(self, scalp_recording):
        with pytest.raises(pp.MissingChannelError, match="Xz"):
            pp.select_common_channels(scalp_recording, ["Cz", "Xz"])

    def test_order_respected(self, scalp_recording):
        out = pp.select_common_channels(scalp_recording, ["Pz", "Cz"])
        assert out.channel_names == ["Pz", "Cz"]
        i_pz = scalp_recording.channel_names.index("Pz")
        np.testing.assert_array_equal(out.data[0], scalp_recording.data[i_pz])


class TestPipeline:
    def test_end_to_end(self):
        rec = smooth_scalp_recording(seed=2, duration=30.0)
        es, qc = pp.preprocess_recording(rec)
        assert len(es.channel_names) == 54
        assert es.epochs.shape[2] == 500  # 2 s at 250 Hz
        assert es.n_epochs == 15
        assert qc.n_epochs_total == 15
        assert qc.n_epochs_rejected == int((~es.keep_mask).sum())
        assert qc.rms_before > 0 and qc.rms_after > 0
        parsed = __import__("json").loads(qc.to_json())
        assert parsed["condition"] == "eyes_open"

    def test_spike_epoch_rejected_end_to_end(self):
        rec = smooth_scalp_recording(seed=4, duration=40.0)
        data = np.array(rec.data)
        # one ugly second right inside what becomes epoch index 5
        start = int(11.2 * rec.sample_rate)
        data[:, start:start + int(rec.sample_rate)] += 400.0
        es, qc = pp.preprocess_recording(rec.with_data(data))
        assert not es.keep_mask[5]
        assert qc.n_epochs_rejected >= 1
