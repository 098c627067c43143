"""Volume format round trips, preprocessing oracles, phantom cohort
statistics, and stratified K-fold partition checks."""

import json

import numpy as np
import pytest

from salvox import data as sd
from util import rel_err


def _trilinear_at(vol, x, y, z):
    # direct 8-corner interpolation, independent of the separable code path
    x0, y0, z0 = int(np.floor(x)), int(np.floor(y)), int(np.floor(z))
    x0, y0, z0 = min(x0, vol.shape[0] - 2), min(y0, vol.shape[1] - 2), min(z0, vol.shape[2] - 2)
    fx, fy, fz = x - x0, y - y0, z - z0
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (fx if dx else 1 - fx)
                    * (fy if dy else 1 - fy)
                    * (fz if dz else 1 - fz)
                )
                acc += w * vol[x0 + dx, y0 + dy, z0 + dz]
    return acc


class TestVolumeFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        v = sd.Volume(side=8, voxels=rng.standard_normal((8, 8, 8)).astype(np.float32))
        sd.save_volume(v, tmp_path / "probe")
        back = sd.load_volume(tmp_path / "probe.vol")
        assert back.side == 8
        assert np.array_equal(back.voxels, v.voxels)
        assert back.voxels.dtype == np.float32

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        v = sd.Volume(side=4, voxels=np.zeros((4, 4, 4), dtype=np.float32))
        path = sd.save_volume(v, tmp_path / "cut")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(sd.VolumeFormatError) as err:
            sd.load_volume(path)
        assert "256" in str(err.value) and "248" in str(err.value)

    def test_side_4_payload_64_floats_accepted(self, tmp_path):
        (tmp_path / "ok.json").write_text(json.dumps({"side": 4, "version": 1}))
        (tmp_path / "ok.vol").write_bytes(
            np.arange(64, dtype="<f4").tobytes()
        )
        v = sd.load_volume(tmp_path / "ok.vol")
        assert v.voxels.shape == (4, 4, 4)
        assert v.voxels[0, 0, 1] == 1.0

    def test_non_finite_rejected(self, tmp_path):
        bad = np.zeros((4, 4, 4), dtype=np.float32)
        bad[1, 2, 3] = np.nan
        sd.save_volume(sd.Volume(side=4, voxels=bad), tmp_path / "bad")
        with pytest.raises(sd.VolumeDataError):
            sd.load_volume(tmp_path / "bad")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "orphan.vol").write_bytes(b"\x00" * 4)
        with pytest.raises(sd.VolumeFormatError):
            sd.load_volume(tmp_path / "orphan.vol")


class TestPreprocess:
    def test_constant_volume_maps_to_zeros(self):
        v = sd.Volume(side=4, voxels=np.full((4, 4, 4), 3.5, dtype=np.float32))
        out = sd.preprocess(v, 6)
        assert out.side == 6
        assert np.array_equal(out.voxels, np.zeros((6, 6, 6), dtype=np.float32))
        assert out.value_range == (3.5, 3.5)

    def test_identity_on_normalized_same_size(self):
        rng = np.random.default_rng(1)
        vox = rng.uniform(0, 1, (5, 5, 5)).astype(np.float32)
        vox.flat[0], vox.flat[-1] = 0.0, 1.0  # span the full range
        out = sd.preprocess(sd.Volume(side=5, voxels=vox), 5)
        assert np.allclose(out.voxels, vox, atol=1e-7)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        v = sd.Volume(side=6, voxels=rng.standard_normal((6, 6, 6)).astype(np.float32))
        once = sd.preprocess(v, 6)
        twice = sd.preprocess(once, 6)
        assert np.allclose(once.voxels, twice.voxels, atol=1e-7)

    def test_2cube_to_4cube_matches_hand_trilinear(self):
        vox = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
        out = sd.preprocess(sd.Volume(side=2, voxels=vox), 4)
        # normalization maps {0..7} to {0..1}; sample grid is 0, 1/3, 2/3, 1
        norm = vox / 7.0
        coords = np.linspace(0.0, 1.0, 4)
        for i, x in enumerate(coords):
            for j, y in enumerate(coords):
                for k, z in enumerate(coords):
                    expected = _trilinear_at(norm, x, y, z)
                    assert abs(out.voxels[i, j, k] - expected) < 1e-6

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(3)
        v = sd.Volume(side=9, voxels=(rng.standard_normal((9, 9, 9)) * 50).astype(np.float32))
        out = sd.preprocess(v, 8)
        assert out.voxels.min() >= 0.0 and out.voxels.max() <= 1.0

    def test_target_below_2_rejected(self):
        v = sd.Volume(side=4, voxels=np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            sd.preprocess(v, 1)


class TestPhantoms:
    def test_default_cohort_counts(self):
        ds = sd.generate_phantoms(sd.PhantomConfig(side=16, seed=5))
        assert len(ds.subjects) == 78
        assert sum(1 for s in ds.subjects if s.label == sd.POSITIVE) == 42
        assert sum(1 for s in ds.subjects if s.label == sd.CONTROL) == 36
        assert ds.region_table.shape == (78, 34)
        assert len(set(ds.ids)) == 78

    def test_same_seed_byte_identical(self):
        cfg = sd.PhantomConfig(n_positive=4, n_control=3, side=12, seed=9)
        a = sd.generate_phantoms(cfg)
        b = sd.generate_phantoms(cfg)
        for sa, sb in zip(a.subjects, b.subjects):
            assert sa.id == sb.id and sa.label == sb.label
            assert np.array_equal(sa.volume.voxels, sb.volume.voxels)
        assert np.array_equal(a.region_table, b.region_table)

    def test_zero_amplitude_classes_identical_in_law(self):
        # two-sample mean test over voxel means at alpha=0.01
        cfg = sd.PhantomConfig(
            n_positive=40, n_control=40, side=10, salient_amplitude=0.0, seed=11
        )
        ds = sd.generate_phantoms(cfg)
        rng = np.random.default_rng(0)
        flat_idx = rng.integers(0, 10**3, 1000)
        pos = np.stack([s.volume.voxels.ravel()[flat_idx] for s in ds.subjects if s.label == sd.POSITIVE])
        ctl = np.stack([s.volume.voxels.ravel()[flat_idx] for s in ds.subjects if s.label == sd.CONTROL])
        a, b = pos.mean(axis=1), ctl.mean(axis=1)
        t = (a.mean() - b.mean()) / np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
        assert abs(t) < 2.58  # z threshold for alpha=0.01

    def test_class_mean_distance_increases_with_amplitude(self):
        gaps = []
        for amp in (0.0, 0.4, 0.8):
            dists = []
            for seed in range(20):
                cfg = sd.PhantomConfig(
                    n_positive=6, n_control=6, side=10, salient_amplitude=amp, seed=seed
                )
                ds = sd.generate_phantoms(cfg)
                pos = np.mean([s.volume.voxels for s in ds.subjects if s.label == sd.POSITIVE], axis=0)
                ctl = np.mean([s.volume.voxels for s in ds.subjects if s.label == sd.CONTROL], axis=0)
                dists.append(np.linalg.norm(pos - ctl))
            gaps.append(np.mean(dists))
        assert gaps[0] < gaps[1] < gaps[2]

    def test_nonsalient_columns_class_balanced(self):
        cfg = sd.PhantomConfig(n_positive=40, n_control=40, side=8, seed=13)
        ds = sd.generate_phantoms(cfg)
        pos = ds.region_table[:40]
        ctl = ds.region_table[40:]
        for col in range(34):
            a, b = pos[:, col], ctl[:, col]
            t = (a.mean() - b.mean()) / np.sqrt(a.var(ddof=1) / 40 + b.var(ddof=1) / 40)
            if col in sd.DEFAULT_SALIENT_REGIONS:
                assert t > 2.58  # coupled columns shift upward for positives
            else:
                assert abs(t) < 3.5  # generous: 34 simultaneous tests

    def test_salient_columns_track_thinning_magnitude(self):
        side, h = 32, 2
        cfg = sd.PhantomConfig(n_positive=30, n_control=10, side=side, seed=17)
        ds = sd.generate_phantoms(cfg)
        # region proxy: salient columns relative to their control means
        cols = list(sd.DEFAULT_SALIENT_REGIONS)
        ctl_cols = ds.region_table[30:, cols].mean(axis=0)
        proxy = (ds.region_table[:30, cols] / ctl_cols - 1.0).mean(axis=1)
        # volume recovery: smoothed minimum near the perturbation site; the
        # window must stay inside tissue or the boundary swamps the trough
        c = [int(round(v * side)) for v in (0.36, 0.62, 0.56)]
        w = 2 * h + 1
        dips = []
        for s in ds.subjects[:30]:
            patch = s.volume.voxels[
                c[0] - h - 1 : c[0] + h + 2,
                c[1] - h - 1 : c[1] + h + 2,
                c[2] - h - 1 : c[2] + h + 2,
            ]
            sm = sum(
                patch[dx : dx + w, dy : dy + w, dz : dz + w]
                for dx in range(3)
                for dy in range(3)
                for dz in range(3)
            ) / 27.0
            dips.append(float(sm.min()))
        r = np.corrcoef(proxy, dips)[0, 1]
        assert r < -0.5

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            sd.generate_phantoms(sd.PhantomConfig(n_positive=0))
        with pytest.raises(ValueError):
            sd.generate_phantoms(sd.PhantomConfig(salient_region_indices=(40,)))


class TestSplitKfold:
    def test_balanced_6_into_3(self):
        labels = ["positive", "control"] * 3
        splits = sd.split_kfold(6, 3, labels, seed=0)
        for train, test in splits:
            assert len(test) == 2
            assert sorted(labels[i] for i in test) == ["control", "positive"]
            assert len(train) == 4

    @pytest.mark.filterwarnings("ignore::UserWarning")
    @pytest.mark.parametrize("k", [3, 5, 10, 20])
    def test_partition_exhaustive(self, k):
        for n in range(k, 21):
            labels = [("positive" if i % 2 else "control") for i in range(n)]
            splits = sd.split_kfold(n, k, labels, seed=n)
            all_test = np.concatenate([test for _, test in splits])
            assert sorted(all_test.tolist()) == list(range(n))
            for train, test in splits:
                assert set(train).isdisjoint(set(test))
                assert sorted(np.concatenate([train, test]).tolist()) == list(range(n))

    def test_stratification_within_one(self):
        labels = ["positive"] * 42 + ["control"] * 36
        for k in (3, 5, 10, 20):
            splits = sd.split_kfold(78, k, labels, seed=k)
            for _, test in splits:
                n_pos = sum(1 for i in test if labels[i] == "positive")
                expected = 42 / k
                assert abs(n_pos - expected) <= 1.0

    def test_deterministic_in_seed(self):
        labels = ["positive"] * 10 + ["control"] * 10
        a = sd.split_kfold(20, 5, labels, seed=3)
        b = sd.split_kfold(20, 5, labels, seed=3)
        c = sd.split_kfold(20, 5, labels, seed=4)
        for (ta, sa), (tb, sb) in zip(a, b):
            assert np.array_equal(ta, tb) and np.array_equal(sa, sb)
        assert any(not np.array_equal(sa, sc) for (_, sa), (_, sc) in zip(a, c))

    def test_small_class_warns(self):
        labels = ["positive"] * 2 + ["control"] * 8
        with pytest.warns(UserWarning):
            sd.split_kfold(10, 5, labels, seed=0)

    def test_k_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sd.split_kfold(4, 5, ["positive"] * 4, seed=0)
        with pytest.raises(ValueError):
            sd.split_kfold(4, 1, ["positive"] * 4, seed=0)


class TestDatasetPersistence:
    def test_save_load_round_trip(self, tmp_path):
        ds = sd.generate_phantoms(
            sd.PhantomConfig(n_positive=3, n_control=2, side=8, seed=21)
        )
        manifest = sd.save_dataset(ds, tmp_path / "cohort")
        back = sd.load_dataset(manifest)
        assert back.ids == ds.ids
        assert back.labels == ds.labels
        for sa, sb in zip(ds.subjects, back.subjects):
            assert np.array_equal(sa.volume.voxels, sb.volume.voxels)
        assert np.allclose(back.region_table, ds.region_table, rtol=0, atol=0)
        assert back.region_names == sd.REGION_NAMES

    def test_load_accepts_directory(self, tmp_path):
        ds = sd.generate_phantoms(
            sd.PhantomConfig(n_positive=2, n_control=2, side=8, seed=22)
        )
        sd.save_dataset(ds, tmp_path)
        assert sd.load_dataset(tmp_path).ids == ds.ids

    def test_region_csv_full_precision(self, tmp_path):
        table = np.random.default_rng(23).uniform(1000, 4000, (3, 34))
        sd.write_region_csv(tmp_path / "r.csv", ["a", "b", "c"], table)
        ids, back, names = sd.read_region_csv(tmp_path / "r.csv")
        assert ids == ["a", "b", "c"]
        assert np.array_equal(back, table)
        assert names == sd.REGION_NAMES

    def test_duplicate_ids_rejected(self):
        v = sd.Volume(side=4, voxels=np.zeros((4, 4, 4), dtype=np.float32))
        subjects = [
            sd.Subject(id="x", volume=v, label="positive"),
            sd.Subject(id="x", volume=v, label="control"),
        ]
        with pytest.raises(ValueError):
            sd.LabeledDataset(subjects)
