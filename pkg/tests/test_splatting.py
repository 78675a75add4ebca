import numpy as np
import pytest

from gsocc.gaussians import GaussianSet, SemanticGaussian, gaussian_eval
from gsocc.grid import GridSpec
from gsocc.splatting import (OccupancyGrid, build_index, export_grid_ascii, index_for_grid, read_grid, splat,
                             splat_backward, write_grid)
from tests.conftest import random_gaussians


def brute_force(g, grid, kappa, b_empty=1.0, empty_index=0):
    """Direct double loop over voxel centres and Gaussians."""
    centres = grid.centers()
    out = np.zeros((len(centres), g.n_classes))
    members = g.to_list()
    for v, x in enumerate(centres):
        acc = np.zeros(g.n_classes)
        for gi in members:
            if np.linalg.norm(x - gi.mean) <= kappa * gi.scale.max():
                acc = acc + gaussian_eval(gi, x)
        out[v] = acc
    out[:, empty_index] += b_empty
    return out.reshape(grid.counts + (g.n_classes,))


class TestIndex:
    def test_superset_of_exhaustive_scan(self, rng):
        g = random_gaussians(rng, 60, 2, lo=-2, hi=6, scale=(0.05, 0.6))
        idx = build_index(g, 0.7, kappa=3.0)
        radii = 3.0 * g.scales.max(axis=1)
        for x in rng.uniform(-3, 7, (300, 3)):
            truth = np.nonzero(np.linalg.norm(g.means - x, axis=1) <= radii)[0]
            got = idx.query(x)
            assert set(truth) <= set(got)
            assert np.all(np.diff(got) > 0)

    def test_unbounded_kappa_returns_all(self, rng):
        g = random_gaussians(rng, 7, 2)
        np.testing.assert_array_equal(build_index(g, 1.0, kappa=np.inf).query((100.0, 0, 0)), np.arange(7))

    def test_stale_index_rejected(self, rng, small_grid):
        g = random_gaussians(rng, 5, 2)
        idx = index_for_grid(g, small_grid)
        with pytest.raises(ValueError):
            splat(g.replace(means=g.means + 0.1), small_grid, idx)

    def test_validation(self, rng):
        g = random_gaussians(rng, 2, 2)
        with pytest.raises(ValueError):
            build_index(g, 1.0, kappa=0.0)
        with pytest.raises(ValueError):
            build_index(g, 0.0)


class TestSplat:
    def test_single_gaussian_at_voxel_centre(self):
        grid = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (3, 3, 3))
        g = GaussianSet.from_list([SemanticGaussian((1.5, 1.5, 1.5), (1, 0, 0, 0), (1, 1, 1), 0.8, (0.0, 2.0))])
        occ = splat(g, grid, kappa=10)
        assert occ.values[1, 1, 1].tolist() == pytest.approx([1.0, 1.6])
        assert occ.values[2, 1, 1, 1] == pytest.approx(1.6 * np.exp(-0.5))
        assert occ.values[2, 2, 2, 1] == pytest.approx(1.6 * np.exp(-1.5))

    def test_cutoff(self):
        grid = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (5, 1, 1))
        g = GaussianSet.from_list([SemanticGaussian((0.5, 0.5, 0.5), (1, 0, 0, 0), (1, 1, 1), 1.0, (0.0, 1.0))])
        occ = splat(g, grid, kappa=2.5)
        assert occ.values[2, 0, 0, 1] > 0 and occ.values[3, 0, 0, 1] == 0.0

    def test_empty_set_gives_background(self, small_grid):
        occ = splat(GaussianSet.empty(3), small_grid, b_empty=0.7)
        np.testing.assert_array_equal(occ.values[..., 0], 0.7)
        np.testing.assert_array_equal(occ.values[..., 1:], 0.0)

    @pytest.mark.parametrize("kappa", [1.5, 3.0, np.inf])
    def test_matches_brute_force(self, rng, small_grid, kappa):
        g = random_gaussians(rng, 25, 3, lo=-0.5, hi=4.5, scale=(0.1, 0.8))
        got = splat(g, small_grid, kappa=kappa, empty_index=2, b_empty=0.3).values
        np.testing.assert_allclose(got, brute_force(g, small_grid, kappa, 0.3, 2), rtol=1e-12, atol=1e-14)

    def test_translation_equivariance(self, rng, small_grid):
        g = random_gaussians(rng, 20, 2, scale=(0.1, 0.6))
        shift = np.array([1.5, -2.0, 0.5])
        a = splat(g, small_grid).values
        b = splat(g.replace(means=g.means + shift), small_grid.translated(shift)).values
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_kappa_monotone_for_positive_logits(self, rng, small_grid):
        g = random_gaussians(rng, 30, 3, scale=(0.1, 0.7), positive=True)
        prev = None
        for kappa in (0.5, 1.0, 2.0, 3.0, 5.0, np.inf):
            cur = splat(g, small_grid, kappa=kappa).values
            if prev is not None:
                assert np.all(cur >= prev)
            prev = cur

    def test_labels(self, rng, small_grid):
        occ = splat(random_gaussians(rng, 10, 3), small_grid)
        np.testing.assert_array_equal(occ.labels(), np.argmax(occ.values, axis=3))
        assert occ.as_labels().is_labels


class TestBackward:
    def test_matches_finite_differences(self, rng):
        grid = GridSpec((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (5, 5, 5))
        g = random_gaussians(rng, 4, 3, lo=0.5, hi=2.0, scale=(0.3, 0.8))
        up = rng.normal(size=grid.counts + (3,))
        f = lambda gg: float(np.sum(up * splat(gg, grid, kappa=np.inf).values))
        grads = splat_backward(g, grid, up, kappa=np.inf)
        h = 1e-6
        for field, analytic in (("means", grads.means), ("scales", grads.scales), ("rotations", grads.rotations),
                                ("opacities", grads.opacities), ("logits", grads.logits)):
            base = getattr(g, field)
            est = np.zeros_like(base)
            for i in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[i] += h
                minus[i] -= h
                est[i] = (f(g.replace(**{field: plus})) - f(g.replace(**{field: minus}))) / (2 * h)
            np.testing.assert_allclose(analytic, est, rtol=1e-5, atol=1e-6, err_msg=field)

    def test_rejects_nan_upstream(self, rng, small_grid):
        up = np.zeros(small_grid.counts + (2,))
        up[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            splat_backward(random_gaussians(rng, 3, 2), small_grid, up)


class TestGridFiles:
    def test_roundtrip_logits(self, rng, small_grid, tmp_path):
        occ = splat(random_gaussians(rng, 10, 3), small_grid)
        write_grid(tmp_path / "g.ogr", occ)
        back = read_grid(tmp_path / "g.ogr")
        assert back.grid == small_grid and back.n_classes == 3 and not back.is_labels
        np.testing.assert_array_equal(back.values, occ.values.astype(np.float32))

    def test_roundtrip_labels(self, rng, small_grid, tmp_path):
        occ = OccupancyGrid(small_grid, rng.integers(0, 4, small_grid.counts), 4)
        write_grid(tmp_path / "g.ogr", occ)
        back = read_grid(tmp_path / "g.ogr")
        np.testing.assert_array_equal(back.values, occ.values)
        assert (tmp_path / "g.ogr").stat().st_size == 93 + 2 * small_grid.n_voxels

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ogr").write_bytes(b"JUNK" * 30)
        with pytest.raises(ValueError):
            read_grid(tmp_path / "x.ogr")

    def test_ascii_export(self, small_grid, tmp_path):
        labels = np.zeros(small_grid.counts, dtype=int)
        labels[1, 2, 3] = 2
        labels[0, 0, 0] = 1
        n = export_grid_ascii(tmp_path / "a.txt", OccupancyGrid(small_grid, labels, 3))
        rows = (tmp_path / "a.txt").read_text().splitlines()
        assert n == 2 and rows == ["0.250000 0.250000 0.250000 1", "0.750000 1.250000 1.750000 2"]
