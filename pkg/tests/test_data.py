import numpy as np
import pytest

from voxadv.core import DomainError, LabelMask, Volume
from voxadv.data import (CaseEntry, DatasetManifest, generate_synthetic,
                         make_split, preprocess, read_grid, read_mask,
                         read_volume, resample_mask, write_grid, write_mask,
                         write_volume)


class TestGridIO:
    def test_volume_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = Volume(voxels=rng.random((8, 9, 10)).astype(np.float32),
                     spacing=(1.0, 1.25, 2.5))
        write_volume(tmp_path / "v.vxvl", vol)
        back = read_volume(tmp_path / "v.vxvl")
        assert np.array_equal(back.voxels, vol.voxels)
        assert back.spacing == vol.spacing

    def test_mask_round_trip(self, tmp_path):
        labels = np.random.default_rng(1).integers(0, 3, size=(6, 6, 6))
        write_mask(tmp_path / "m.vxvl", LabelMask(labels=labels, num_classes=3))
        back = read_mask(tmp_path / "m.vxvl", 3)
        assert np.array_equal(back.labels, labels)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk.vxvl").write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(DomainError):
            read_grid(tmp_path / "junk.vxvl")

    def test_non_3d_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            write_grid(tmp_path / "x.vxvl", np.zeros((4, 4), dtype=np.float32))


class TestGeneration:
    def test_counts_and_splits(self, tmp_path):
        m = generate_synthetic(tmp_path, seed=3, n_train=5, n_test=2, size=16)
        assert len(m.ids("train")) == 5 and len(m.ids("test")) == 2
        assert m.size == 16 and m.num_classes == 2

    def test_byte_identical_determinism(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic(a, seed=7, n_train=3, n_test=1, size=16)
        generate_synthetic(b, seed=7, n_train=3, n_test=1, size=16)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_seed_changes_content(self, tmp_path):
        a = generate_synthetic(tmp_path / "a", seed=1, n_train=1, n_test=0, size=16)
        b = generate_synthetic(tmp_path / "b", seed=2, n_train=1, n_test=0, size=16)
        va = a.load_volume("case_000").voxels
        vb = b.load_volume("case_000").voxels
        assert not np.array_equal(va, vb)

    def test_foreground_fraction_band(self, tmp_path):
        m = generate_synthetic(tmp_path, seed=11, n_train=40, n_test=0, size=32)
        fracs = [float((m.load_mask(cid).labels > 0).mean())
                 for cid in m.ids("train")]
        mean = float(np.mean(fracs))
        assert 0.05 <= mean <= 0.20, mean

    def test_multiclass_labels_present(self, tmp_path):
        m = generate_synthetic(tmp_path, seed=5, n_train=4, n_test=0, size=32,
                               num_classes=4)
        seen = set()
        for cid in m.ids("train"):
            seen |= set(np.unique(m.load_mask(cid).labels).tolist())
        assert seen == {0, 1, 2, 3}

    def test_intensity_in_unit_range(self, tmp_path):
        m = generate_synthetic(tmp_path, seed=9, n_train=3, n_test=0, size=16)
        for cid in m.ids("train"):
            v = m.load_volume(cid).voxels
            assert v.min() >= 0.0 and v.max() <= 1.0

    def test_size_must_divide_by_eight(self, tmp_path):
        with pytest.raises(DomainError):
            generate_synthetic(tmp_path, seed=0, size=30)

    def test_manifest_round_trip(self, tmp_path):
        m = generate_synthetic(tmp_path, seed=3, n_train=2, n_test=1, size=16)
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert back.ids("train") == m.ids("train")
        assert back.ids("test") == m.ids("test")
        assert back.num_classes == m.num_classes


def synthetic_manifest(n_train):
    cases = [CaseEntry(f"c{i}", f"c{i}.vxvl", f"c{i}_m.vxvl", "train")
             for i in range(n_train)]
    return DatasetManifest(root=".", num_classes=2, size=32, seed=0, cases=cases)


class TestSplit:
    def test_eighty_at_ten_percent(self):
        m = make_split(synthetic_manifest(80), 0.10, seed=0)
        assert len(m.ids("labeled")) == 8 and len(m.ids("unlabeled")) == 72

    def test_seventy_at_twenty_percent(self):
        m = make_split(synthetic_manifest(70), 0.20, seed=0)
        assert len(m.ids("labeled")) == 14 and len(m.ids("unlabeled")) == 56

    def test_full_supervision(self):
        m = make_split(synthetic_manifest(10), 1.0, seed=0)
        assert len(m.ids("labeled")) == 10 and len(m.ids("unlabeled")) == 0

    def test_ceil_rounding(self):
        m = make_split(synthetic_manifest(10), 0.11, seed=0)
        assert len(m.ids("labeled")) == 2

    def test_deterministic_assignment(self):
        a = make_split(synthetic_manifest(20), 0.3, seed=4)
        b = make_split(synthetic_manifest(20), 0.3, seed=4)
        assert a.ids("labeled") == b.ids("labeled")

    def test_fraction_out_of_range(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(DomainError):
                make_split(synthetic_manifest(10), bad, seed=0)

    def test_resplit_is_stable(self):
        m = make_split(synthetic_manifest(20), 0.3, seed=4)
        first = m.ids("labeled")
        make_split(m, 0.3, seed=4)
        assert m.ids("labeled") == first


class TestPreprocess:
    def vol(self, arr, spacing=(1.0, 1.0, 1.0)):
        return Volume(voxels=np.asarray(arr, dtype=np.float32), spacing=spacing)

    def test_synthetic_is_identity(self):
        v = self.vol(np.random.default_rng(0).random((8, 8, 8)))
        out = preprocess(v, "synthetic")
        assert np.array_equal(out.voxels, v.voxels)

    def test_constant_volume_maps_to_half(self):
        out = preprocess(self.vol(np.full((8, 8, 8), 42.0)), "la")
        assert np.allclose(out.voxels, 0.5)

    def test_la_output_spans_unit_interval(self):
        v = self.vol(np.random.default_rng(1).normal(100, 30, (8, 8, 8)))
        out = preprocess(v, "la")
        assert abs(out.voxels.min()) < 1e-6
        assert abs(out.voxels.max() - 1.0) < 1e-6

    def test_la_idempotent(self):
        v = self.vol(np.random.default_rng(2).normal(0, 50, (8, 8, 8)))
        once = preprocess(v, "la")
        twice = preprocess(once, "la")
        assert np.abs(twice.voxels - once.voxels).max() < 1e-6

    def test_mo_clips_window(self):
        arr = np.full((96, 96, 48), 100.0)
        arr[0, 0, 0] = -500.0
        arr[0, 0, 1] = 400.0
        out = preprocess(self.vol(arr), "mo")
        # after clipping, extremes are -200 and 250 before normalization, so
        # the output still spans [0, 1] with the clipped pair at the ends
        assert out.voxels.shape == (128, 128, 64)
        assert abs(out.voxels.min()) < 1e-6
        assert abs(out.voxels.max() - 1.0) < 1e-6

    def test_mo_resamples_shape_and_spacing(self):
        v = self.vol(np.random.default_rng(3).random((96, 96, 48)),
                     spacing=(1.0, 1.0, 2.0))
        out = preprocess(v, "mo")
        assert out.voxels.shape == (128, 128, 64)
        assert np.allclose(out.spacing, (96 / 128, 96 / 128, 2.0 * 48 / 64))

    def test_non_finite_rejected(self):
        arr = np.zeros((8, 8, 8), dtype=np.float32)
        arr[0, 0, 0] = np.nan
        with pytest.raises(DomainError):
            preprocess(self.vol(arr), "la")

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            preprocess(self.vol(np.zeros((8, 8, 8))), "ct")


class TestAnnotationNoise:
    def clean_and_stored(self, tmp_path, idx, n_train=2, n_test=1):
        from voxadv.data import _make_case
        m = generate_synthetic(tmp_path, seed=13, n_train=n_train,
                               n_test=n_test, size=32)
        rng = np.random.default_rng([13, idx])
        _, clean = _make_case(rng, 32, 2)
        stored = m.load_mask(f"case_{idx:03d}").labels
        return clean, stored

    def test_train_flips_confined_to_boundary_band(self, tmp_path):
        clean, stored = self.clean_and_stored(tmp_path, idx=0)
        diff = clean != stored
        assert diff.any()  # some flips occurred
        from voxadv.data import ANNOTATION_BAND
        region = clean == 1
        dilated, eroded = region.copy(), region.copy()
        for _ in range(ANNOTATION_BAND):
            next_d, next_e = dilated.copy(), eroded.copy()
            for axis in range(3):
                for step in (-1, 1):
                    shifted = np.roll(dilated, step, axis=axis)
                    edge = [slice(None)] * 3
                    edge[axis] = 0 if step > 0 else -1
                    shifted[tuple(edge)] = False
                    next_d |= shifted
                    shifted = np.roll(eroded, step, axis=axis)
                    shifted[tuple(edge)] = False
                    next_e &= shifted
            dilated, eroded = next_d, next_e
        band = dilated & ~eroded
        assert not (diff & ~band).any()

    def test_test_masks_are_clean(self, tmp_path):
        clean, stored = self.clean_and_stored(tmp_path, idx=2)
        assert np.array_equal(clean, stored)


def test_resample_mask_preserves_labels():
    labels = np.random.default_rng(4).integers(0, 3, size=(12, 12, 12))
    out = resample_mask(LabelMask(labels=labels, num_classes=3), (8, 8, 8))
    assert out.labels.shape == (8, 8, 8)
    assert set(np.unique(out.labels)) <= {0, 1, 2}
