import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsocc.gaussians import read_goc, write_goc
from gsocc.grid import GridSpec
from gsocc.initialization import InitConfig, assign_voxels, init_gaussians, init_gaussians_with_assignment
from gsocc.lidar import voxelize

GRID = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (10, 10, 4))


def voxels_from(rng, n_points):
    cloud = np.concatenate([rng.uniform(GRID.lower, GRID.upper, (n_points, 3)),
                            rng.uniform(0, 1, (n_points, 1))], axis=1)
    return voxelize(cloud, GRID)


def check_seeded(g, voxels, assignment, cfg):
    seeded = assignment >= 0
    np.testing.assert_array_equal(g.means[seeded], voxels.mean_positions[assignment[seeded]])
    np.testing.assert_array_equal(g.opacities[seeded], voxels.mean_intensities[assignment[seeded]])
    np.testing.assert_array_equal(g.scales, np.tile(cfg.default_scale, (len(g), 1)))
    np.testing.assert_array_equal(g.rotations, np.tile(cfg.default_rotation, (len(g), 1)))
    np.testing.assert_array_equal(g.logits, 0.0)
    unseeded = ~seeded
    assert np.all(g.opacities[unseeded] == cfg.default_opacity)
    assert np.all((g.means[unseeded] >= GRID.lower) & (g.means[unseeded] <= GRID.upper))


class TestRegimes:
    def test_more_voxels_than_gaussians(self, rng):
        vox = voxels_from(rng, 2000)
        cfg = InitConfig(n_gaussians=50, default_scale=(0.5, 0.5, 0.5))
        g, a = init_gaussians_with_assignment(vox, cfg)
        assert len(g) == 50 and np.all(a >= 0) and len(np.unique(a)) == 50
        check_seeded(g, vox, a, cfg)

    def test_equal(self, rng):
        vox = voxels_from(rng, 30)
        cfg = InitConfig(n_gaussians=len(vox), default_scale=(0.5, 0.5, 0.5))
        g, a = init_gaussians_with_assignment(vox, cfg)
        assert sorted(a.tolist()) == list(range(len(vox)))
        check_seeded(g, vox, a, cfg)

    def test_fewer_voxels_than_gaussians(self, rng):
        vox = voxels_from(rng, 20)
        cfg = InitConfig(n_gaussians=100, default_scale=(0.5, 0.5, 0.5))
        g, a = init_gaussians_with_assignment(vox, cfg)
        assert (a >= 0).sum() == len(vox)
        assert sorted(a[a >= 0].tolist()) == list(range(len(vox)))
        check_seeded(g, vox, a, cfg)

    def test_no_voxels_fallback(self):
        vox = voxelize(np.zeros((0, 4)), GRID)
        cfg = InitConfig(n_gaussians=16, default_scale=(0.5, 0.5, 0.5))
        g, a = init_gaussians_with_assignment(vox, cfg)
        assert np.all(a == -1)
        check_seeded(g, vox, a, cfg)

    def test_no_voxels_strict(self):
        vox = voxelize(np.zeros((0, 4)), GRID)
        with pytest.raises(ValueError):
            init_gaussians(vox, InitConfig(n_gaussians=4, allow_default_fallback=False))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            InitConfig(n_gaussians=0)
        with pytest.raises(ValueError):
            InitConfig(default_scale=(0.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            InitConfig(n_classes=3, default_logits=(0.0, 0.0))

    def test_custom_logits(self, rng):
        vox = voxels_from(rng, 10)
        g = init_gaussians(vox, InitConfig(n_gaussians=5, n_classes=3, default_logits=(1.0, 2.0, 3.0)))
        np.testing.assert_array_equal(g.logits, np.tile([1.0, 2.0, 3.0], (5, 1)))


class TestDeterminism:
    def test_same_seed_same_bytes(self, rng, tmp_path):
        vox = voxels_from(rng, 500)
        cfg = InitConfig(n_gaussians=64, rng_seed=9)
        write_goc(tmp_path / "a.goc", init_gaussians(vox, cfg))
        write_goc(tmp_path / "b.goc", init_gaussians(vox, cfg))
        assert (tmp_path / "a.goc").read_bytes() == (tmp_path / "b.goc").read_bytes()
        assert len(read_goc(tmp_path / "a.goc")) == 64

    def test_different_seed_differs(self, rng):
        vox = voxels_from(rng, 500)
        a = init_gaussians(vox, InitConfig(n_gaussians=64, rng_seed=1))
        b = init_gaussians(vox, InitConfig(n_gaussians=64, rng_seed=2))
        assert not np.array_equal(a.means, b.means)

    def test_assignment_is_uniform_ish(self):
        counts = np.zeros(10)
        for seed in range(2000):
            counts[assign_voxels(10, 1, np.random.default_rng(seed))] += 1
        assert counts.min() > 140 and counts.max() < 260


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.integers(1, 200), st.integers(0, 1000))
def test_property_counts_and_seeding(n_points, n_g, seed):
    rng = np.random.default_rng(seed)
    vox = voxels_from(rng, n_points)
    cfg = InitConfig(n_gaussians=n_g, rng_seed=seed, default_scale=(0.5, 0.5, 0.5))
    g, a = init_gaussians_with_assignment(vox, cfg)
    assert len(g) == n_g
    assert (a >= 0).sum() == min(n_g, len(vox))
    assert len(np.unique(a[a >= 0])) == (a >= 0).sum()
    check_seeded(g, vox, a, cfg)
