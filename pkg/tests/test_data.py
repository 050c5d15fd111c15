"""Tests for datasets: speaker splitting, the synthetic generator (with
a nearest-centroid oracle bounding its intrinsic error rate), the TFCF
binary format, and the batch iterator."""

import os

import numpy as np
import pytest

from tfcmnn.data import (FrameDataset, SyntheticSpec, batch_iterator, class_pattern,
                         generate_synthetic, import_csv, read_feature_file,
                         split_by_speaker, write_feature_file)
from tfcmnn.errors import DataFormatError, DomainError

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "golden.tfcf")


def toy_dataset(n=40, n_speakers=10, dim=18, width=5, seed=0):
    rng = np.random.default_rng(seed)
    return FrameDataset(rng.normal(size=(n, dim, width)),
                        rng.integers(0, 30, n),
                        np.arange(n) % n_speakers)


class TestFrameDataset:
    def test_length_mismatch_rejected(self):
        with pytest.raises(DataFormatError):
            FrameDataset(np.zeros((3, 18, 5)), [0, 1], [0, 0, 0])

    def test_label_range_enforced(self):
        with pytest.raises(DataFormatError):
            FrameDataset(np.zeros((2, 18, 5)), [0, 30], [0, 0])

    def test_width_property(self):
        assert toy_dataset(width=5).width == 5
        ds = FrameDataset(np.zeros((2, 18)), [0, 1], [0, 1])
        assert ds.width == 0


class TestSplitBySpeaker:
    def test_partition_is_exact_and_eval_disjoint(self):
        ds = toy_dataset(n=200, n_speakers=10)
        tr, dev, ev = split_by_speaker(ds, 0.1, 2, seed=0)
        assert len(tr) + len(dev) + len(ev) == len(ds)
        assert len(np.unique(ev.speakers)) == 2
        assert not set(ev.speakers.tolist()) & set(tr.speakers.tolist())
        assert not set(ev.speakers.tolist()) & set(dev.speakers.tolist())

    def test_dev_fraction_zero(self):
        tr, dev, ev = split_by_speaker(toy_dataset(), 0.0, 2, seed=0)
        assert len(dev) == 0

    def test_304_speakers_7_eval(self):
        n_speakers = 304
        ds = toy_dataset(n=2 * n_speakers, n_speakers=n_speakers, width=3)
        tr, dev, ev = split_by_speaker(ds, 0.05, 7, seed=1)
        assert len(np.unique(ev.speakers)) == 7
        assert len(np.unique(np.concatenate([tr.speakers, dev.speakers]))) == 297

    def test_dev_frame_fraction(self):
        ds = toy_dataset(n=1000, n_speakers=20)
        tr, dev, ev = split_by_speaker(ds, 0.25, 2, seed=3)
        pool = len(ds) - len(ev)
        assert len(dev) == round(0.25 * pool)

    def test_per_speaker_dev_disjoint_everywhere(self):
        ds = toy_dataset(n=400, n_speakers=20)
        tr, dev, ev = split_by_speaker(ds, 0.25, 2, seed=4, per_speaker_dev=True)
        assert len(tr) + len(dev) + len(ev) == len(ds)
        spk = [set(s.speakers.tolist()) for s in (tr, dev, ev)]
        assert not spk[0] & spk[1] and not spk[0] & spk[2] and not spk[1] & spk[2]

    def test_deterministic(self):
        ds = toy_dataset(n=300, n_speakers=15)
        a = split_by_speaker(ds, 0.1, 3, seed=9)
        b = split_by_speaker(ds, 0.1, 3, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.patches, y.patches)
            assert np.array_equal(x.labels, y.labels)

    def test_too_few_speakers(self):
        with pytest.raises(DataFormatError):
            split_by_speaker(toy_dataset(n_speakers=3), 0.1, 2, seed=0)


class TestSynthetic:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(seed=7, frames_per_class=20)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert np.array_equal(a.patches, b.patches)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.speakers, b.speakers)

    def test_sigma_zero_linearly_separable(self):
        """Noiseless patterns of different classes occupy disjoint cells,
        so a nearest-centroid rule on raw pixels is perfect."""
        spec = SyntheticSpec(n_classes=2, frames_per_class=30, noise=0.0, seed=1)
        ds = generate_synthetic(spec)
        centroids = np.stack([class_pattern(spec, c) for c in range(2)])
        flat = ds.patches.reshape(len(ds), -1)
        d = ((flat[:, None, :] - centroids.reshape(2, -1)[None]) ** 2).sum(axis=2)
        assert np.array_equal(np.argmin(d, axis=1), ds.labels)

    def test_default_config_bayes_error_below_1pct(self):
        """Nearest-centroid oracle on the acceptance noise level: the
        intrinsic error of the task must be well under 1%."""
        spec = SyntheticSpec(seed=5)     # 4 classes, sigma 0.3, width 15
        ds = generate_synthetic(spec)
        centroids = np.stack([class_pattern(spec, c).ravel()
                              for c in range(spec.n_classes)])
        flat = ds.patches.reshape(len(ds), -1)
        d = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        err = np.mean(np.argmin(d, axis=1) != ds.labels)
        assert err < 0.01

    def test_pattern_kinds_select_axis(self):
        spec = SyntheticSpec(n_classes=4, frames_per_class=1, noise=0.0, seed=0)
        # even classes: column band constant down rows; odd: row band
        p_time = class_pattern(spec, 0)
        assert np.all(p_time.max(axis=0) == p_time.min(axis=0))
        p_freq = class_pattern(spec, 1)
        assert np.all(p_freq.max(axis=1) == p_freq.min(axis=1))
        assert p_time.max() == spec.amplitude and p_freq.max() == spec.amplitude

    def test_every_speaker_present(self):
        ds = generate_synthetic(SyntheticSpec(frames_per_class=20, seed=2))
        assert len(np.unique(ds.speakers)) == 14

    def test_invalid_spec(self):
        with pytest.raises(DomainError):
            SyntheticSpec(n_classes=1)
        with pytest.raises(DomainError):
            SyntheticSpec(noise=-0.1)
        with pytest.raises(DomainError):
            SyntheticSpec(kinds=["time"])


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = toy_dataset(n=17, width=5)
        p = str(tmp_path / "x.tfcf")
        write_feature_file(p, ds)
        back = read_feature_file(p)
        assert np.array_equal(back.patches, ds.patches)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.speakers, ds.speakers)

    def test_round_trip_unwindowed(self, tmp_path):
        rng = np.random.default_rng(3)
        ds = FrameDataset(rng.normal(size=(9, 18)), rng.integers(0, 30, 9),
                          np.zeros(9, dtype=np.int64))
        p = str(tmp_path / "u.tfcf")
        write_feature_file(p, ds)
        back = read_feature_file(p)
        assert back.width == 0
        assert np.array_equal(back.patches, ds.patches)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.tfcf"
        p.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(DataFormatError, match="magic"):
            read_feature_file(str(p))

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "t.tfcf"
        p.write_bytes(b"TFCF\x01\x00")
        with pytest.raises(DataFormatError, match="truncated"):
            read_feature_file(str(p))

    def test_truncated_payload(self, tmp_path):
        ds = toy_dataset(n=5, width=3)
        p = tmp_path / "p.tfcf"
        write_feature_file(str(p), ds)
        blob = p.read_bytes()
        p.write_bytes(blob[:len(blob) - 20])
        with pytest.raises(DataFormatError, match="truncated"):
            read_feature_file(str(p))

    def test_crc_mismatch(self, tmp_path):
        ds = toy_dataset(n=5, width=3)
        p = tmp_path / "c.tfcf"
        write_feature_file(str(p), ds)
        blob = bytearray(p.read_bytes())
        blob[40] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="CRC"):
            read_feature_file(str(p))

    def test_bad_version(self, tmp_path):
        import zlib
        payload = bytearray()
        payload += (99).to_bytes(4, "little")
        payload += (18).to_bytes(2, "little")
        payload += (0).to_bytes(2, "little")
        payload += (0).to_bytes(8, "little")
        p = tmp_path / "v.tfcf"
        p.write_bytes(b"TFCF" + payload + zlib.crc32(payload).to_bytes(4, "little"))
        with pytest.raises(DataFormatError, match="version"):
            read_feature_file(str(p))

    def test_golden_fixture_parses_identically(self):
        """Frozen on-disk fixture guards the byte layout against drift."""
        ds = read_feature_file(FIXTURE)
        assert len(ds) == 4
        assert ds.width == 3
        assert ds.patches.shape == (4, 18, 3)
        assert ds.labels.tolist() == [0, 7, 29, 3]
        assert ds.speakers.tolist() == [0, 1, 2, 65535]
        # spot-checked values written by the generator script
        assert ds.patches[0, 0, 0] == 0.125
        assert ds.patches[3, 17, 2] == -1.5

    def test_oversized_speaker_rejected(self, tmp_path):
        ds = toy_dataset(n=3, width=2)
        ds.speakers[0] = 70000
        with pytest.raises(DataFormatError, match="u16"):
            write_feature_file(str(tmp_path / "s.tfcf"), ds)


class TestImportCsv:
    def test_round_values(self, tmp_path):
        p = tmp_path / "f.csv"
        rows = ["3,5," + ",".join(str(i * 0.5) for i in range(18)),
                "4,7," + ",".join(str(-i * 0.25) for i in range(18))]
        p.write_text("\n".join(rows) + "\n")
        ds = import_csv(str(p))
        assert ds.speakers.tolist() == [3, 4]
        assert ds.labels.tolist() == [5, 7]
        assert ds.patches.shape == (2, 18)
        assert ds.patches[0, 2] == 1.0


class TestBatchIterator:
    def test_250_over_100(self):
        sizes = [len(b) for b in batch_iterator(250, 100, seed=0, epoch_index=1)]
        assert sizes == [100, 100, 50]

    def test_multiset_equality(self):
        seen = np.concatenate(list(batch_iterator(123, 17, seed=4, epoch_index=2)))
        assert np.array_equal(np.sort(seen), np.arange(123))

    def test_epochs_differ_but_cover(self):
        a = np.concatenate(list(batch_iterator(500, 64, seed=1, epoch_index=1)))
        b = np.concatenate(list(batch_iterator(500, 64, seed=1, epoch_index=2)))
        assert not np.array_equal(a, b)
        assert np.array_equal(np.sort(a), np.sort(b))

    def test_deterministic(self):
        a = list(batch_iterator(90, 30, seed=6, epoch_index=3))
        b = list(batch_iterator(90, 30, seed=6, epoch_index=3))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_bad_batch_size(self):
        with pytest.raises(DomainError):
            list(batch_iterator(10, 0, seed=0, epoch_index=0))
