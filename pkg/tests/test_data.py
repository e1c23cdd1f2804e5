"""Ingestion, label codec, window cache, stratified splits, class weights,
and the synthetic generator."""

import numpy as np
import pytest

from dystan import data, dsp
from dystan.errors import ConfigError, IntegrityError, ParseError


def make_recording(segment_id="seg-1", pid="p01", sed="AL", soc="A",
                   n=3000, seed=0):
    channels = np.random.default_rng(seed).standard_normal((13, n)) * 0.2
    return data.RawRecording(
        segment_id, pid, dsp.SensorSegment(channels, 50.0), sed, soc
    )


class TestLabelCodec:
    def test_codec_table(self):
        assert data.encode_labels("AL", "A") == (0, 0)
        assert data.encode_labels("E", "WSEIC") == (1, 1)
        assert data.encode_labels("R", "WSNEIC") == (2, 2)
        assert data.encode_labels("S", "A") == (3, 0)

    def test_other_is_excluded(self):
        assert data.encode_labels("OTHER", "WSEIC") is None

    def test_round_trip_all_twelve_pairs(self):
        seen = set()
        for sed_name in data.SED_CLASSES:
            for soc_name in data.SOC_CLASSES:
                sed, soc = data.encode_labels(sed_name, soc_name)
                assert data.decode_labels(sed, soc) == (sed_name, soc_name)
                seen.add((sed, soc))
        assert len(seen) == 12

    def test_unknown_labels_rejected(self):
        with pytest.raises(ParseError):
            data.encode_labels("NAP", "A")
        with pytest.raises(ParseError):
            data.encode_labels("AL", "CROWD")


class TestCsvIngestion:
    def test_round_trip(self, tmp_path, rng):
        recs = [
            make_recording("seg-1", "p01", "AL", "A", seed=1),
            make_recording("seg-2", "p02", "OTHER", "WSEIC", seed=2),
        ]
        path = tmp_path / "recs.csv"
        data.write_recordings_csv(path, recs)
        loaded = data.load_recordings(path)
        assert [r.segment_id for r in loaded] == ["seg-1", "seg-2"]
        assert loaded[0].segment.channels.shape == (13, 3000)
        assert np.abs(loaded[0].segment.channels - recs[0].segment.channels).max() < 1e-12
        assert loaded[1].sedentary_label == "OTHER"

    def test_header_only_gives_empty_list(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(data.CSV_HEADER + "\n")
        assert data.load_recordings(path) == []

    def test_non_numeric_field_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        rec = make_recording()
        data.write_recordings_csv(path, [rec])
        lines = path.read_text().splitlines()
        parts = lines[5].split(",")
        parts[7] = "not-a-number"
        lines[5] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            data.load_recordings(path)
        assert err.value.line == 6  # header is line 1

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ParseError):
            data.load_recordings(path)

    def test_non_monotone_timestamps_rejected(self, tmp_path):
        path = tmp_path / "ts.csv"
        data.write_recordings_csv(path, [make_recording()])
        lines = path.read_text().splitlines()
        parts = lines[10].split(",")
        parts[2] = "0.0"
        lines[10] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(IntegrityError):
            data.load_recordings(path)

    def test_wrong_duration_rejected(self, tmp_path):
        path = tmp_path / "short.csv"
        data.write_recordings_csv(path, [make_recording(n=2500)])
        with pytest.raises(IntegrityError):
            data.load_recordings(path)

    def test_gap_repair_interpolates(self, tmp_path):
        # drop one interior row: repaired segment still has 3000 samples
        path = tmp_path / "gap.csv"
        data.write_recordings_csv(path, [make_recording()])
        lines = path.read_text().splitlines()
        del lines[100]
        path.write_text("\n".join(lines) + "\n")
        loaded = data.load_recordings(path)
        assert loaded[0].segment.channels.shape == (13, 3000)


class TestWindowsFromRecordings:
    def test_one_minute_yields_47_windows(self):
        rec = make_recording()
        windows = data.windows_from_recordings([rec])
        assert len(windows) == 47
        assert windows[0].features.shape == (13, 100)
        assert windows[0].sed == 0 and windows[0].soc == 0
        assert windows[0].participant_id == "p01"

    def test_other_dropped_by_default_kept_on_request(self):
        rec = make_recording(sed="OTHER")
        assert data.windows_from_recordings([rec]) == []
        kept = data.windows_from_recordings([rec], keep_other=True)
        assert len(kept) == 47
        assert all(w.sed == data.OTHER_CODE for w in kept)


class TestWindowCache:
    def test_round_trip(self, tmp_path, rng):
        windows = [
            data.LabeledWindow(rng.standard_normal((13, 100)), s % 4, s % 3, f"p{s}")
            for s in range(7)
        ]
        path = tmp_path / "cache.bin"
        data.write_window_cache(path, windows)
        loaded = data.read_window_cache(path)
        assert len(loaded) == 7
        for a, b in zip(windows, loaded):
            assert np.array_equal(a.features, b.features)
            assert (a.sed, a.soc, a.participant_id) == (b.sed, b.soc, b.participant_id)

    def test_other_sentinel_round_trips(self, tmp_path, rng):
        w = data.LabeledWindow(rng.standard_normal((13, 100)), data.OTHER_CODE, 1, "p")
        path = tmp_path / "cache.bin"
        data.write_window_cache(path, [w])
        assert data.read_window_cache(path)[0].sed == data.OTHER_CODE

    def test_header_layout(self, tmp_path):
        path = tmp_path / "cache.bin"
        data.write_window_cache(path, [])
        blob = path.read_bytes()
        assert blob[:4] == b"SSCD"
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:10], "little") == 0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(ParseError):
            data.read_window_cache(path)


def balanced_labels(per_class):
    sed, soc = [], []
    for s in range(4):
        for c in range(3):
            sed += [s] * per_class
            soc += [c] * per_class
    return np.array(sed), np.array(soc)


class TestStratifiedKfold:
    def test_each_fold_test_split_has_two_per_class(self):
        sed, soc = balanced_labels(10)  # 120 windows
        plan = data.stratified_kfold(sed, soc, k=5, seed=3)
        joint = sed * 3 + soc
        for fold in plan.folds:
            counts = np.bincount(joint[fold.test_ids], minlength=12)
            assert np.array_equal(counts, np.full(12, 2))

    def test_split_sizes_64_16_20(self):
        sed, soc = balanced_labels(10)
        plan = data.stratified_kfold(sed, soc, k=5, seed=3)
        for fold in plan.folds:
            assert len(fold.test_ids) == 24
            assert len(fold.val_ids) in (19, 20)
            assert len(fold.train_ids) in (76, 77)
            assert len(fold.test_ids) + len(fold.val_ids) + len(fold.train_ids) == 120

    def test_folds_partition_dataset(self):
        sed, soc = balanced_labels(7)
        plan = data.stratified_kfold(sed, soc, k=5, seed=11)
        all_test = np.concatenate([f.test_ids for f in plan.folds])
        assert len(all_test) == len(sed)
        assert len(np.unique(all_test)) == len(sed)
        for fold in plan.folds:
            combined = np.concatenate([fold.train_ids, fold.val_ids, fold.test_ids])
            assert np.array_equal(np.sort(combined), np.arange(len(sed)))
            assert not set(fold.train_ids) & set(fold.test_ids)
            assert not set(fold.val_ids) & set(fold.test_ids)
            assert not set(fold.train_ids) & set(fold.val_ids)

    def test_test_proportions_within_one_per_class(self, rng):
        # unbalanced class sizes still stratify to within one window
        sed = np.concatenate([np.full(n, s) for s, n in enumerate((30, 18, 11, 25))])
        soc = np.concatenate(
            [rng.integers(0, 3, size=n) for n in (30, 18, 11, 25)]
        )
        # ensure every joint class has >= 5 members
        sed, soc = balanced_labels(6)
        extra_sed = np.array([0] * 9 + [1] * 7 + [2] * 6 + [3] * 11)
        extra_soc = np.array(([0, 1, 2] * 11)[: len(extra_sed)])
        sed = np.concatenate([sed, extra_sed])
        soc = np.concatenate([soc, extra_soc])
        plan = data.stratified_kfold(sed, soc, k=5, seed=4)
        joint = sed * 3 + soc
        for fold in plan.folds:
            for cls in range(12):
                total = int(np.sum(joint == cls))
                in_fold = int(np.sum(joint[fold.test_ids] == cls))
                assert abs(in_fold - total / 5) < 1.0 + 1e-9

    def test_same_seed_reproduces_assignment(self):
        sed, soc = balanced_labels(6)
        a = data.stratified_kfold(sed, soc, k=5, seed=9)
        b = data.stratified_kfold(sed, soc, k=5, seed=9)
        assert np.array_equal(a.fold_of, b.fold_of)
        assert a.split_hash() == b.split_hash()
        for fa, fb in zip(a.folds, b.folds):
            assert np.array_equal(fa.train_ids, fb.train_ids)
            assert np.array_equal(fa.val_ids, fb.val_ids)

    def test_scarce_class_rejected(self):
        sed, soc = balanced_labels(5)
        sed = sed[:-1]
        soc = soc[:-1]  # last joint class now has 4 < k members
        with pytest.raises(ConfigError):
            data.stratified_kfold(sed, soc, k=5, seed=0)

    def test_grouped_mode_prevents_participant_leakage(self):
        sed, soc = balanced_labels(10)
        pids = [f"p{i % 6}" for i in range(len(sed))]
        plan = data.stratified_kfold(sed, soc, k=5, seed=2, participant_ids=pids)
        for fold in plan.folds:
            train_pids = {pids[i] for i in fold.train_ids}
            test_pids = {pids[i] for i in fold.test_ids}
            assert not train_pids & test_pids


class TestClassWeights:
    def test_balanced_counts_give_unit_weights(self):
        w = data.class_weights([0, 0, 1, 1, 2, 2], 3)
        assert np.allclose(w, 1.0, atol=1e-15)

    def test_hand_computed_case(self):
        w = data.class_weights([0] * 10 + [1] * 30, 2)
        assert np.allclose(w, [2.0, 40.0 / 60.0], atol=1e-12)

    def test_weights_times_counts_sum_to_n(self, rng):
        for _ in range(10):
            counts = rng.integers(1, 40, size=4)
            labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
            w = data.class_weights(labels, 4)
            assert abs(np.dot(w, counts) - labels.size) < 1e-9

    def test_absent_class_rejected(self):
        with pytest.raises(ConfigError):
            data.class_weights([0, 0, 1], 3)


class TestSynthGenerator:
    def test_deterministic(self):
        cfg = data.SynthConfig(samples_per_joint_class=3, noise_std=0.2,
                               coupling=0.4, seed=42)
        a = data.synth_windows(cfg)
        b = data.synth_windows(cfg)
        assert len(a) == len(b) == 36
        for wa, wb in zip(a, b):
            assert np.array_equal(wa.features, wb.features)

    def test_output_count(self):
        cfg = data.SynthConfig(samples_per_joint_class=5, seed=0)
        assert len(data.synth_windows(cfg)) == 60

    def test_distinct_dominant_frequencies_per_sed_class(self):
        cfg = data.SynthConfig(samples_per_joint_class=2, noise_std=0.0,
                               coupling=0.0, seed=7)
        windows = data.synth_windows(cfg)
        peaks = {}
        for w in windows:
            spectrum = np.abs(np.fft.rfft(w.features[0]))
            spectrum[0] = 0.0
            peaks.setdefault(w.sed, set()).add(int(np.argmax(spectrum)))
        # leakage can split a between-bins tone over adjacent bins, but the
        # classes' peak sets must stay disjoint
        bins = [peaks[s] for s in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not bins[i] & bins[j]

    def test_amplitude_separates_social_classes(self):
        cfg = data.SynthConfig(samples_per_joint_class=4, noise_std=0.0,
                               coupling=0.0, seed=3)
        windows = data.synth_windows(cfg)
        rms = {c: [] for c in range(3)}
        for w in windows:
            rms[w.soc].append(np.sqrt(np.mean(w.features[6:13] ** 2)))
        # disjoint RMS ranges: each task is linearly separable in a 1-d
        # feature (soc by channel energy, sed by dominant-frequency bin)
        assert max(rms[0]) < min(rms[1])
        assert max(rms[1]) < min(rms[2])

    def test_coupling_changes_sed_channels(self):
        base = data.SynthConfig(samples_per_joint_class=2, noise_std=0.0,
                                coupling=0.0, seed=5)
        coupled = data.SynthConfig(samples_per_joint_class=2, noise_std=0.0,
                                   coupling=0.5, seed=5)
        a = data.synth_windows(base)
        b = data.synth_windows(coupled)
        diffs = [np.abs(wa.features[:6] - wb.features[:6]).max() for wa, wb in zip(a, b)]
        assert max(diffs) > 0.01

    def test_recordings_run_through_pipeline(self):
        cfg = data.SynthConfig(samples_per_joint_class=1, noise_std=0.05,
                               coupling=0.2, seed=9)
        recordings = data.synth_recordings(cfg)
        assert len(recordings) == 12
        windows = data.windows_from_recordings(recordings[:1])
        assert len(windows) == 47

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            data.SynthConfig(samples_per_joint_class=0)
        with pytest.raises(ConfigError):
            data.SynthConfig(samples_per_joint_class=1, coupling=1.5)
        with pytest.raises(ConfigError):
            data.SynthConfig(samples_per_joint_class=1, noise_std=-0.1)
