import numpy as np
import pytest

from delaycast import alignment as al
from delaycast import data as dt
from delaycast.engine import Tensor
from delaycast.errors import DataError, FormatError
from delaycast.graphs import NodeGeometry


def random_dataset(rng, t=40, n=4, c=2, geometry=True, split="7:1:2"):
    geom = NodeGeometry(coords=rng.normal(size=(n, 2)), kind="planar") if geometry else None
    return dt.Dataset(values=rng.normal(size=(t, n, c)), geometry=geom, split=split)


class TestDataset:
    def test_split_bounds_are_contiguous_and_ordered(self):
        ds = random_dataset(np.random.default_rng(0), t=100)
        bounds = ds.split_bounds()
        assert bounds["train"] == (0, 70)
        assert bounds["val"] == (70, 80)
        assert bounds["test"] == (80, 100)

    def test_traffic_style_split(self):
        ds = random_dataset(np.random.default_rng(1), t=100, split="6:2:2")
        bounds = ds.split_bounds()
        assert bounds["train"] == (0, 60) and bounds["val"] == (60, 80)

    def test_nan_rejected(self):
        values = np.zeros((10, 2, 1))
        values[3, 1, 0] = np.nan
        with pytest.raises(DataError):
            dt.Dataset(values=values)

    def test_geometry_node_count_checked(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DataError):
            dt.Dataset(values=rng.normal(size=(10, 3, 1)),
                       geometry=NodeGeometry(coords=np.zeros((4, 2)), kind="planar"))


class TestNormalize:
    def test_already_standard_is_identity(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(1000, 3, 2))
        train = raw[:700]
        raw = (raw - train.mean(axis=(0, 1))) / train.std(axis=(0, 1))
        ds = dt.Dataset(values=raw, split="7:1:2")
        out = dt.normalize(ds)
        np.testing.assert_allclose(out.values, ds.values, atol=1e-12)

    def test_affine_data_standardized_exactly(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(100, 2, 1))
        ds = dt.Dataset(values=2.0 * x + 3.0, split="7:1:2")
        out = dt.normalize(ds)
        train = out.split_values("train")
        assert train.mean() == pytest.approx(0.0, abs=1e-12)
        assert train.std() == pytest.approx(1.0, rel=1e-12)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng)
        out = dt.normalize(ds)
        np.testing.assert_allclose(dt.denormalize(out, out.values), ds.values, atol=1e-10)

    def test_zero_variance_channel_rejected(self):
        values = np.concatenate([np.random.default_rng(6).normal(size=(20, 2, 1)),
                                 np.full((20, 2, 1), 7.0)], axis=2)
        with pytest.raises(DataError, match="1"):
            dt.normalize(dt.Dataset(values=values))

    def test_no_leakage_from_test_split(self):
        rng = np.random.default_rng(7)
        base = rng.normal(size=(50, 2, 1))
        ds_a = dt.normalize(dt.Dataset(values=base.copy()))
        tampered = base.copy()
        tampered[45:] += 100.0  # test split only
        ds_b = dt.normalize(dt.Dataset(values=tampered))
        np.testing.assert_array_equal(ds_a.norm_mean, ds_b.norm_mean)
        np.testing.assert_array_equal(ds_a.norm_std, ds_b.norm_std)

    def test_double_normalize_rejected(self):
        ds = dt.normalize(random_dataset(np.random.default_rng(8)))
        with pytest.raises(DataError):
            dt.normalize(ds)


class TestWindowing:
    def test_exactly_one_sample(self):
        rng = np.random.default_rng(9)
        ds = dt.Dataset(values=rng.normal(size=(24, 2, 1)), split="1:0:0")
        assert dt.window_count(ds, 12, 12, "train") == 1

    def test_count_formula_by_enumeration(self):
        rng = np.random.default_rng(10)
        ds = dt.Dataset(values=rng.normal(size=(30, 2, 1)), split="1:0:0")
        samples = list(dt.iter_windows(ds, 12, 12, "train"))
        assert len(samples) == 7 == dt.window_count(ds, 12, 12, "train")

    def test_windows_adjacent_and_inside_split(self):
        rng = np.random.default_rng(11)
        ds = dt.Dataset(values=rng.normal(size=(80, 2, 1)), split="7:1:2")
        for sample in dt.iter_windows(ds, 4, 3, "val"):
            assert sample.inputs.shape == (2, 4, 1)
            assert sample.target.shape == (2, 3, 1)
        val = ds.split_values("val")
        first = next(dt.iter_windows(ds, 4, 3, "val"))
        np.testing.assert_array_equal(first.inputs, val[0:4].transpose(1, 0, 2))
        np.testing.assert_array_equal(first.target, val[4:7].transpose(1, 0, 2))

    def test_short_split_rejected(self):
        rng = np.random.default_rng(12)
        ds = dt.Dataset(values=rng.normal(size=(30, 2, 1)), split="7:1:2")
        with pytest.raises(DataError):
            dt.window_count(ds, 12, 12, "val")

    def test_batch_matches_iter(self):
        rng = np.random.default_rng(13)
        ds = dt.Dataset(values=rng.normal(size=(30, 3, 2)), split="1:0:0")
        x, y = dt.window_batch(ds, 5, 4, "train", [0, 3, 7])
        samples = list(dt.iter_windows(ds, 5, 4, "train"))
        for row, origin in enumerate([0, 3, 7]):
            np.testing.assert_array_equal(x[row], samples[origin].inputs)
            np.testing.assert_array_equal(y[row], samples[origin].target)


class TestSynthGenerator:
    def test_zero_delay_zero_noise_identical_series(self):
        spec = dt.SynthSpec(n_nodes=4, n_steps=64, max_delay=0, noise_sigma=0.0)
        ds, delays = dt.synth_delayed_diffusion(spec, seed=0)
        np.testing.assert_array_equal(delays, np.zeros(4, dtype=int))
        for i in range(1, 4):
            np.testing.assert_array_equal(ds.values[:, i], ds.values[:, 0])

    def test_noiseless_delays_recovered_exactly(self):
        spec = dt.SynthSpec(n_nodes=16, n_steps=48, max_delay=23, noise_sigma=0.0)
        identity = al.ProjectionParams(Tensor(np.eye(1)), Tensor(np.eye(1)))
        for seed in range(20):
            ds, delays = dt.synth_delayed_diffusion(spec, seed=seed)
            x = ds.values.transpose(1, 0, 2)  # one window spanning the series
            recovered = al.estimate_delays(Tensor(x), identity, reference="node:0")
            np.testing.assert_array_equal(recovered, delays)

    def test_noisy_recovery_rate(self):
        spec = dt.SynthSpec(n_nodes=16, n_steps=48, max_delay=23, noise_sigma=0.1)
        identity = al.ProjectionParams(Tensor(np.eye(1)), Tensor(np.eye(1)))
        hits = trials = 0
        for seed in range(100):
            ds, delays = dt.synth_delayed_diffusion(spec, seed=seed)
            x = ds.values.transpose(1, 0, 2)
            recovered = al.estimate_delays(Tensor(x), identity, reference="node:0")
            hits += int((recovered == delays).sum())
            trials += len(delays)
        assert hits / trials >= 0.95

    def test_seed_determinism(self):
        spec = dt.SynthSpec(n_nodes=5, n_steps=100, max_delay=3, noise_sigma=0.2)
        a, da = dt.synth_delayed_diffusion(spec, seed=42)
        b, db = dt.synth_delayed_diffusion(spec, seed=42)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(da, db)
        np.testing.assert_array_equal(a.geometry.coords, b.geometry.coords)

    def test_geometry_reflects_delays(self):
        spec = dt.SynthSpec(n_nodes=8, n_steps=64, max_delay=5)
        ds, delays = dt.synth_delayed_diffusion(spec, seed=1)
        radii = np.linalg.norm(ds.geometry.coords, axis=1)
        assert radii[0] == 0.0
        assert np.all(radii[1:] >= delays[1:])

    def test_spec_validation(self):
        with pytest.raises(DataError):
            dt.SynthSpec(n_nodes=0)
        with pytest.raises(DataError):
            dt.SynthSpec(max_delay=-1)
        with pytest.raises(DataError):
            dt.SynthSpec(noise_sigma=-0.1)


class TestSTGF:
    def test_round_trip_bit_exact_f64(self, tmp_path):
        rng = np.random.default_rng(14)
        ds = random_dataset(rng)
        path = tmp_path / "data.stgf"
        dt.save_stgf(path, ds, dtype="float64")
        loaded = dt.load_stgf(path)
        np.testing.assert_array_equal(loaded.values, ds.values)
        np.testing.assert_array_equal(loaded.geometry.coords, ds.geometry.coords)
        assert loaded.geometry.kind == "planar"

    def test_round_trip_bit_exact_f32(self, tmp_path):
        rng = np.random.default_rng(15)
        values = rng.normal(size=(20, 3, 1)).astype(np.float32)
        ds = dt.Dataset(values=values)
        path = tmp_path / "data.stgf"
        dt.save_stgf(path, ds, dtype="float32")
        loaded = dt.load_stgf(path)
        assert loaded.values.dtype == np.float32
        np.testing.assert_array_equal(loaded.values, values)

    def test_no_geometry_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        ds = random_dataset(rng, geometry=False)
        path = tmp_path / "plain.stgf"
        dt.save_stgf(path, ds)
        assert dt.load_stgf(path).geometry is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.stgf"
        path.write_bytes(b"WXYZ" + b"\x00" * 30)
        with pytest.raises(FormatError) as err:
            dt.load_stgf(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(17)
        ds = random_dataset(rng)
        path = tmp_path / "data.stgf"
        dt.save_stgf(path, ds)
        blob = path.read_bytes()
        cut = tmp_path / "cut.stgf"
        cut.write_bytes(blob[:-17])
        with pytest.raises(FormatError, match="truncated"):
            dt.load_stgf(cut)

    def test_large_grid_loads(self, tmp_path):
        # node count matching a 32x64 weather grid at desk-scale step count
        rng = np.random.default_rng(18)
        values = rng.normal(size=(1000, 2048, 1)).astype(np.float32)
        ds = dt.Dataset(values=values)
        path = tmp_path / "grid.stgf"
        dt.save_stgf(path, ds, dtype="float32")
        loaded = dt.load_stgf(path)
        assert loaded.values.shape == (1000, 2048, 1)

    def test_lonlat_coordinates_preserved(self, tmp_path):
        rng = np.random.default_rng(19)
        coords = np.stack([rng.uniform(-180, 180, 5), rng.uniform(-90, 90, 5)], axis=1)
        ds = dt.Dataset(values=rng.normal(size=(10, 5, 1)),
                        geometry=NodeGeometry(coords=coords, kind="lonlat"))
        path = tmp_path / "ll.stgf"
        dt.save_stgf(path, ds)
        loaded = dt.load_stgf(path)
        assert loaded.geometry.kind == "lonlat"
        np.testing.assert_array_equal(loaded.geometry.coords, coords)


class TestTextImport:
    def test_round_trip_through_table(self, tmp_path):
        rng = np.random.default_rng(20)
        values = rng.normal(size=(4, 3, 2))
        lines = ["time,node,channel,value"]
        for t in range(4):
            for n in range(3):
                for c in range(2):
                    lines.append(f"{t},{n},{c},{float(values[t, n, c])!r}")
        path = tmp_path / "table.csv"
        path.write_text("\n".join(lines) + "\n")
        ds = dt.import_text(path)
        np.testing.assert_array_equal(ds.values, values)

    def test_sparse_table_rejected(self, tmp_path):
        path = tmp_path / "sparse.csv"
        path.write_text("time,node,channel,value\n0,0,0,1.0\n1,1,0,2.0\n")
        with pytest.raises(DataError, match="dense"):
            dt.import_text(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c,d\n0,0,0,1.0\n")
        with pytest.raises(DataError):
            dt.import_text(path)
