import numpy as np
import pytest

from beamlearn.channel import (
    ChannelConfig,
    DatasetFormatError,
    PowerGrid,
    derive_rng,
    draw_batch,
    draw_sample,
    path_loss,
    read_dataset,
    write_dataset,
)


class TestPathLoss:
    def test_zero_distance(self):
        cfg = ChannelConfig(m=2, k=2)
        assert path_loss(0.0, cfg) == 1.0

    def test_reference_distance(self):
        cfg = ChannelConfig(m=2, k=2, ref_distance=30.0, pathloss_exp=3.0)
        assert path_loss(30.0, cfg) == pytest.approx(0.5)

    def test_double_reference_distance(self):
        cfg = ChannelConfig(m=2, k=2, ref_distance=30.0, pathloss_exp=3.0)
        assert path_loss(60.0, cfg) == pytest.approx(1.0 / 9.0)

    def test_monotone_decreasing_and_exact(self):
        cfg = ChannelConfig(m=2, k=2)
        d = np.linspace(0.0, 200.0, 100)
        rho = path_loss(d, cfg)
        assert np.all(np.diff(rho) < 0)
        assert np.allclose(rho, 1.0 / (1.0 + (d / 30.0) ** 3))

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            path_loss(-1.0, ChannelConfig(m=2, k=2))


class TestPowerGrid:
    def test_default_levels(self):
        assert PowerGrid().levels_db == (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)

    def test_linear_conversion(self):
        assert np.allclose(PowerGrid((0.0, 10.0, 30.0)).linear(), [1.0, 10.0, 1000.0])

    @pytest.mark.parametrize("levels", [(), (1.0, 1.0), (5.0, 0.0)])
    def test_invalid_grids(self, levels):
        with pytest.raises(ValueError):
            PowerGrid(levels)


class TestDrawing:
    def test_fixed_seed_repeats(self):
        cfg = ChannelConfig(m=3, k=2)
        grid = PowerGrid()
        a = draw_sample(derive_rng(5, 1), cfg, grid)
        b = draw_sample(derive_rng(5, 1), cfg, grid)
        assert np.array_equal(a.hr, b.hr) and np.array_equal(a.hi, b.hi)
        assert a.p_db == b.p_db

    def test_single_draw_equals_batch_of_one(self):
        cfg = ChannelConfig(m=3, k=2)
        grid = PowerGrid()
        s = draw_sample(derive_rng(6, 1), cfg, grid)
        b = draw_batch(derive_rng(6, 1), cfg, grid, 1)
        assert np.array_equal(s.hr, b.hr[0]) and s.p_db == b.p_db[0]

    def test_fading_second_moment(self):
        # path loss forced to ~1 by shrinking the cell to the origin;
        # 25k samples x K=4 gives 1e5 per-user fading draws
        cfg = ChannelConfig(m=4, k=4, cell_radius=1e-9, min_bs_distance=0.0)
        batch = draw_batch(derive_rng(7, 1), cfg, PowerGrid(), 25_000)
        norm_over_m = np.sum(batch.hr**2 + batch.hi**2, axis=2) / cfg.m
        assert abs(float(norm_over_m.mean()) - 1.0) < 0.02

    def test_power_levels_uniform(self):
        cfg = ChannelConfig(m=1, k=1)
        grid = PowerGrid()
        batch = draw_batch(derive_rng(8, 1), cfg, grid, 100_000)
        for lvl in grid.levels_db:
            freq = np.mean(batch.p_db == lvl)
            assert abs(freq - 1.0 / 7.0) < 0.01

    def test_pathloss_range_over_draws(self):
        # replay the documented draw order to recover the distances
        cfg = ChannelConfig(m=2, k=4)
        n = 100_000
        rng = derive_rng(9, 1)
        batch = draw_batch(rng, cfg, PowerGrid(), n)
        rng2 = derive_rng(9, 1)
        lo2, hi2 = cfg.min_bs_distance**2, cfg.cell_radius**2
        d = np.sqrt(lo2 + rng2.random((n, cfg.k)) * (hi2 - lo2))
        rho = path_loss(d, cfg)
        assert np.all(rho > path_loss(cfg.cell_radius, cfg))
        assert np.all(rho <= path_loss(cfg.min_bs_distance, cfg))
        # and the replayed distances are the ones actually used
        fading = rng2.standard_normal((n, cfg.k, cfg.m, 2)) * np.sqrt(0.5)
        assert np.array_equal(batch.hr, np.sqrt(rho)[:, :, None] * fading[..., 0])


class TestDatasetIo:
    def _batch(self, n=100):
        cfg = ChannelConfig(m=3, k=2)
        return draw_batch(derive_rng(10, 1), cfg, PowerGrid(), n)

    def test_round_trip_exact(self, tmp_path):
        batch = self._batch()
        path = tmp_path / "set.txt"
        write_dataset(path, batch, PowerGrid())
        loaded, grid = read_dataset(path)
        assert np.array_equal(loaded.hr, batch.hr)
        assert np.array_equal(loaded.hi, batch.hi)
        assert np.array_equal(loaded.p_db, batch.p_db)
        assert grid == PowerGrid()

    def test_shape_mismatch_names_record(self, tmp_path):
        path = tmp_path / "set.txt"
        write_dataset(path, self._batch(3), PowerGrid())
        lines = path.read_text().splitlines()
        lines[2] = lines[2] + " 0.0"  # corrupt the second record
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 3.*record 1"):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        with pytest.raises(DatasetFormatError, match="empty"):
            read_dataset(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "hdr.txt"
        path.write_text('{"version": 1, "m": 2, "k": 2, "grid_db": [0.0]}\n')
        with pytest.raises(DatasetFormatError, match="no records"):
            read_dataset(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.txt"
        path.write_text('{"version": 9, "m": 2, "k": 2, "grid_db": [0.0]}\n0 1 1 1 1 1 1 1 1\n')
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not json\n")
        with pytest.raises(DatasetFormatError, match="line 1"):
            read_dataset(path)

    def test_refuses_empty_write(self, tmp_path):
        batch = self._batch(1).subset(np.array([], dtype=int))
        with pytest.raises(ValueError, match="empty"):
            write_dataset(tmp_path / "x.txt", batch, PowerGrid())

    def test_non_numeric_field(self, tmp_path):
        path = tmp_path / "nan.txt"
        write_dataset(path, self._batch(2), PowerGrid())
        lines = path.read_text().splitlines()
        fields = lines[1].split()
        fields[3] = "bogus"
        lines[1] = " ".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 2"):
            read_dataset(path)
