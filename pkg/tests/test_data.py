import numpy as np
import pytest

from scdnn.data import (
    EcgDataset,
    EcgRecord,
    EcgbFormatError,
    SYNTH_AMPLITUDE_CAP,
    pad_to_max,
    read_ecgb,
    stratified_split,
    synth_generate,
    write_ecgb,
)


def small_dataset(seed=0):
    rng = np.random.default_rng(seed)
    records = [
        EcgRecord(rng.normal(size=(3, 40)).astype(np.float32), i % 2, f"rec{i}")
        for i in range(10)
    ]
    splits = {f"rec{i}": ("train", "val", "test")[i % 3] for i in range(10)}
    return EcgDataset(records, ["a", "b"], 3, splits)


class TestContainer:
    def test_roundtrip_bitwise(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "d.ecgb"
        write_ecgb(ds, path)
        back = read_ecgb(path)
        assert back.class_names == ds.class_names
        assert back.n_leads == ds.n_leads
        assert back.splits == ds.splits
        for a, b in zip(ds.records, back.records):
            assert a.record_id == b.record_id
            assert a.label == b.label
            np.testing.assert_array_equal(a.leads, b.leads)

    def test_write_is_deterministic(self, tmp_path):
        ds = small_dataset()
        p1, p2 = tmp_path / "a.ecgb", tmp_path / "b.ecgb"
        write_ecgb(ds, p1)
        write_ecgb(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ecgb"
        path.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(EcgbFormatError, match="magic") as err:
            read_ecgb(path)
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "d.ecgb"
        write_ecgb(ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 3])
        with pytest.raises(EcgbFormatError, match="byte"):
            read_ecgb(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "d.ecgb"
        write_ecgb(ds, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(EcgbFormatError, match="trailing"):
            read_ecgb(path)

    def test_class_supports_report(self, tmp_path):
        # a container written with named disease classes reports its
        # vocabulary and per-class supports on read-back
        rng = np.random.default_rng(1)
        names = ["NORM", "MI", "STTC", "CD", "HYP"]
        supports = [9, 5, 5, 4, 2]
        records = []
        for label, count in enumerate(supports):
            for i in range(count):
                records.append(
                    EcgRecord(rng.normal(size=(12, 16)).astype(np.float32),
                              label, f"r{label}-{i}")
                )
        ds = EcgDataset(records, names, 12)
        path = tmp_path / "five.ecgb"
        write_ecgb(ds, path)
        back = read_ecgb(path)
        assert back.class_names == names
        assert back.class_supports() == supports


class TestPadding:
    def test_pads_to_max_with_trailing_zeros(self):
        r1 = EcgRecord(np.ones((2, 3000), dtype=np.float32), 0, "a")
        r2 = EcgRecord(np.ones((2, 5000), dtype=np.float32), 0, "b")
        ds = pad_to_max(EcgDataset([r1, r2], ["x", "y"], 2))
        assert all(r.length == 5000 for r in ds.records)
        np.testing.assert_array_equal(ds.records[0].leads[:, 3000:], 0.0)
        assert ds.records[0].original_length == 3000

    def test_prefix_preserved_exactly(self):
        rng = np.random.default_rng(2)
        leads = rng.normal(size=(2, 37)).astype(np.float32)
        ds = EcgDataset(
            [EcgRecord(leads.copy(), 0, "a"),
             EcgRecord(np.zeros((2, 50), dtype=np.float32), 1, "b")],
            ["x", "y"], 2,
        )
        padded = pad_to_max(ds)
        np.testing.assert_array_equal(padded.records[0].leads[:, :37], leads)

    def test_uniform_dataset_unchanged(self):
        ds = small_dataset()
        padded = pad_to_max(ds)
        for a, b in zip(ds.records, padded.records):
            assert a is b


class TestSynth:
    def test_deterministic(self):
        a = synth_generate(5, 3, length=128, seed=42)
        b = synth_generate(5, 3, length=128, seed=42)
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.leads, rb.leads)
        c = synth_generate(5, 3, length=128, seed=43)
        assert not np.array_equal(a.records[0].leads, c.records[0].leads)

    def test_noise_zero_gives_exact_class_templates(self):
        ds = synth_generate(3, 3, length=512, noise_std=0.0, seed=9)
        for rec in ds.records:
            period = max(16, 512 // (4 + 2 * rec.label))
            np.testing.assert_array_equal(rec.leads[:, : 512 - period],
                                          rec.leads[:, period:])
        by_class = {}
        for rec in ds.records:
            by_class.setdefault(rec.label, []).append(rec)
        for recs in by_class.values():
            for other in recs[1:]:
                np.testing.assert_array_equal(recs[0].leads, other.leads)

    def test_bounded_and_finite(self):
        ds = synth_generate(4, 2, length=256, noise_std=2.0, seed=3)
        for rec in ds.records:
            assert np.all(np.isfinite(rec.leads))
            assert np.abs(rec.leads).max() <= SYNTH_AMPLITUDE_CAP

    def test_bandpower_features_linearly_separate_class_0_and_1(self):
        # simple-feature oracle: 8 log-bandpowers + least-squares classifier
        ds = synth_generate(100, 2, n_leads=12, length=512, noise_std=0.05,
                            seed=11)
        feats, labels = [], []
        for rec in ds.records:
            spec = np.abs(np.fft.rfft(rec.leads.astype(np.float64), axis=1)) ** 2
            bands = np.array_split(spec, 8, axis=1)
            feats.append([np.log1p(b.sum()) for b in bands])
            labels.append(rec.label)
        feats = np.asarray(feats)
        labels = np.asarray(labels)
        design = np.hstack([feats, np.ones((len(feats), 1))])
        w, *_ = np.linalg.lstsq(design, 2.0 * labels - 1.0, rcond=None)
        accuracy = ((design @ w > 0).astype(int) == labels).mean()
        assert accuracy > 0.95

    def test_per_class_counts(self):
        ds = synth_generate([7, 3, 5], 3, length=64, seed=0)
        assert ds.class_supports() == [7, 3, 5]
        with pytest.raises(ValueError):
            synth_generate([7, 3], 3, length=64)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_generate(5, 1, length=64)


class TestStratifiedSplit:
    def test_balanced_100_records(self):
        ds = synth_generate(50, 2, length=32, seed=1)
        out = stratified_split(ds, (0.8, 0.1, 0.1), seed=0)
        for cls in (0, 1):
            ids = [r.record_id for r in out.records if r.label == cls]
            train = sum(out.splits[i] == "train" for i in ids)
            assert train == 40

    def test_deterministic(self):
        ds = synth_generate(20, 2, length=32, seed=1)
        a = stratified_split(ds, (0.8, 0.1, 0.1), seed=5).splits
        b = stratified_split(ds, (0.8, 0.1, 0.1), seed=5).splits
        assert a == b

    def test_partition_disjoint_and_exhaustive(self):
        ds = synth_generate([13, 29, 17], 3, length=32, seed=2)
        out = stratified_split(ds, (0.8, 0.1, 0.1), seed=3)
        assigned = [out.splits[r.record_id] for r in out.records]
        assert all(s in ("train", "val", "test") for s in assigned)
        assert len(out.splits) == len(ds.records)

    def test_per_class_train_fraction_within_one_record(self):
        # exhaustive over class sizes 1..50; sizes below 3 go wholly to train
        for size in range(1, 51):
            ds = synth_generate([size, 3], 2, length=32, seed=size)
            if size < 3:
                with pytest.warns(UserWarning, match="assigning all to train"):
                    out = stratified_split(ds, (0.8, 0.1, 0.1), seed=0)
                ids = [r.record_id for r in out.records if r.label == 0]
                assert all(out.splits[i] == "train" for i in ids)
                continue
            out = stratified_split(ds, (0.8, 0.1, 0.1), seed=0)
            ids = [r.record_id for r in out.records if r.label == 0]
            train = sum(out.splits[i] == "train" for i in ids)
            assert abs(train - 0.8 * size) <= 1.0
            assert train >= 1

    def test_fractions_must_sum_to_one(self):
        ds = synth_generate(5, 2, length=32, seed=1)
        with pytest.raises(ValueError, match="sum to 1"):
            stratified_split(ds, (0.5, 0.2, 0.2))
