from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsocc.grid import GridSpec
from gsocc.lidar import (CameraModel, LidarSweepSet, SparseDepthMap, Sweep, aggregate_sweeps, look_at,
                         make_pose, normalize_intensity, project_depth, read_cloud_csv, read_depth_map,
                         read_lpc, voxelize, write_cloud_csv, write_depth_map, write_lpc, yaw_rotation)


def random_cloud(rng, n, lo=-1.0, hi=3.0):
    return np.concatenate([rng.uniform(lo, hi, (n, 3)), rng.uniform(0, 1, (n, 1))], axis=1)


class TestAggregate:
    def test_identity_pose(self, rng):
        pts = random_cloud(rng, 50)
        np.testing.assert_array_equal(aggregate_sweeps(LidarSweepSet([Sweep(pts)])), pts)

    def test_translation(self, rng):
        a, b = random_cloud(rng, 10), random_cloud(rng, 12)
        out = aggregate_sweeps(LidarSweepSet([Sweep(a), Sweep(b, make_pose(translation=(1, 0, 0)), 1.0)]))
        np.testing.assert_array_equal(out[10:, 0], b[:, 0] + 1)
        np.testing.assert_array_equal(out[10:, 1:], b[:, 1:])

    def test_rigid_transform_against_homogeneous_oracle(self, rng):
        pts = random_cloud(rng, 40)
        pose = make_pose(yaw_rotation(0.7) @ np.array([[1, 0, 0], [0, np.cos(0.3), -np.sin(0.3)],
                                                      [0, np.sin(0.3), np.cos(0.3)]]), (1, -2, 0.5))
        out = aggregate_sweeps(LidarSweepSet([Sweep(pts, pose)]))
        homog = np.array([pose @ np.r_[p[:3], 1.0] for p in pts])
        np.testing.assert_allclose(out[:, :3], homog[:, :3], atol=1e-12)
        np.testing.assert_array_equal(out[:, 3], pts[:, 3])

    def test_preserves_count_and_intensity(self, rng):
        sweeps = [Sweep(random_cloud(rng, int(n)), make_pose(yaw_rotation(rng.uniform(0, 6)), rng.normal(size=3)))
                  for n in rng.integers(1, 30, 5)]
        out = aggregate_sweeps(LidarSweepSet(sweeps))
        assert len(out) == sum(len(s.points) for s in sweeps)
        np.testing.assert_array_equal(out[:, 3], np.concatenate([s.points[:, 3] for s in sweeps]))

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate_sweeps(LidarSweepSet([]))
        with pytest.raises(ValueError):
            Sweep(np.zeros((1, 4)), np.diag([1.0, 1, -1, 1]))
        with pytest.raises(ValueError):
            Sweep(np.array([[0, 0, 0, -1.0]]))

    def test_latest(self):
        sweeps = [Sweep(np.zeros((1, 4)), timestamp=t) for t in (3.0, 1.0, 2.0)]
        assert [s.timestamp for s in LidarSweepSet(sweeps).latest(2).sweeps] == [2.0, 3.0]

    def test_normalize_intensity(self):
        cloud = np.array([[0, 0, 0, 2.0], [0, 0, 0, 4.0], [0, 0, 0, 3.0]])
        np.testing.assert_allclose(normalize_intensity(cloud)[:, 3], [0, 1, 0.5])


GRID = GridSpec((-1.0, -1.0, -1.0), (0.5, 0.5, 0.5), (8, 8, 8))


def groupby_oracle(cloud, grid):
    groups = defaultdict(list)
    for p in cloud:
        ijk = tuple(int(np.floor((p[a] - grid.origin[a]) / grid.voxel_size[a])) for a in range(3))
        if all(0 <= ijk[a] < grid.counts[a] for a in range(3)):
            groups[ijk].append(p)
    return {k: (np.mean(v, axis=0), len(v)) for k, v in groups.items()}


class TestVoxelize:
    def test_single_point(self):
        vs = voxelize(np.array([[0.1, 0.2, 0.3, 0.9]]), GRID)
        assert len(vs) == 1
        np.testing.assert_allclose(vs.mean_positions[0], [0.1, 0.2, 0.3], atol=1e-15)
        assert vs.mean_intensities[0] == 0.9 and vs.counts[0] == 1

    def test_mean_intensity(self):
        vs = voxelize(np.array([[0.1, 0.1, 0.1, 0.2], [0.2, 0.2, 0.2, 0.6]]), GRID)
        assert len(vs) == 1
        assert vs.mean_intensities[0] == pytest.approx(0.4, abs=1e-15)

    def test_against_groupby_oracle(self, rng):
        cloud = random_cloud(rng, 10_000, -1.5, 3.5)
        vs = voxelize(cloud, GRID)
        oracle = groupby_oracle(cloud, GRID)
        assert len(vs) == len(oracle)
        for ijk, pos, eta, n in zip(vs.indices, vs.mean_positions, vs.mean_intensities, vs.counts):
            mean, count = oracle[tuple(ijk)]
            assert n == count
            np.testing.assert_allclose(pos, mean[:3], rtol=1e-12, atol=1e-12)
            assert eta == pytest.approx(mean[3], rel=1e-12)
        assert vs.counts.sum() == sum(c for _, c in oracle.values())

    def test_means_inside_voxels(self, rng):
        vs = voxelize(random_cloud(rng, 5000, -1, 3), GRID)
        lo = GRID.lower + vs.indices * 0.5
        assert np.all(vs.mean_positions >= lo) and np.all(vs.mean_positions <= lo + 0.5)
        assert np.all(vs.counts >= 1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 3000, -1, 3)
        a = voxelize(cloud, GRID)
        b = voxelize(cloud[rng.permutation(len(cloud))], GRID)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_allclose(b.mean_positions, a.mean_positions, rtol=1e-9)
        np.testing.assert_allclose(b.mean_intensities, a.mean_intensities, rtol=1e-9)

    def test_out_of_bounds_dropped(self):
        vs = voxelize(np.array([[10.0, 0, 0, 1], [0.1, 0.1, 0.1, 1]]), GRID)
        assert len(vs) == 1 and vs.counts.sum() == 1

    def test_entry_lookup(self):
        vs = voxelize(np.array([[0.1, 0.1, 0.1, 0.5]]), GRID)
        pos, eta, n = vs.entry((2, 2, 2))
        assert n == 1 and eta == 0.5
        with pytest.raises(KeyError):
            vs.entry((0, 0, 0))


CAM = CameraModel(fx=50.0, fy=40.0, cx=32.0, cy=24.0, width=64, height=48)


class TestProjectDepth:
    def test_optical_axis(self):
        dmap = project_depth(np.array([[0, 0, 5.0, 1]]), CAM)
        assert dmap.depth[24, 32] == 5.0
        assert np.isfinite(dmap.depth).sum() == 1

    def test_z_buffer(self):
        dmap = project_depth(np.array([[0, 0, 7.0, 1], [0, 0, 3.0, 1]]), CAM)
        assert dmap.depth[24, 32] == 3.0

    def test_generic_point_against_pinhole_oracle(self, rng):
        ext = look_at((1, 2, 0.5), (10, 3, 0))
        cam = CameraModel(60.0, 55.0, 31.5, 23.0, 64, 48, ext)
        for _ in range(50):
            p = np.array([rng.uniform(5, 20), rng.uniform(-3, 8), rng.uniform(-2, 2)])
            pc = ext[:3, :3] @ p + ext[:3, 3]
            u = 60.0 * pc[0] / pc[2] + 31.5
            v = 55.0 * pc[1] / pc[2] + 23.0
            dmap = project_depth(np.r_[p, 1.0][None], cam)
            if 0 <= u < 64 and 0 <= v < 48:
                assert dmap.depth[int(np.floor(v)), int(np.floor(u))] == pytest.approx(pc[2], rel=1e-12)
            else:
                assert not np.isfinite(dmap.depth).any()

    def test_behind_camera_and_range_dropped(self):
        dmap = project_depth(np.array([[0, 0, -5.0, 1], [0, 0, 80.0, 1]]), CAM, d_max=51.2)
        assert not np.isfinite(dmap.depth).any()

    def test_scale_floor_relation(self, rng):
        pts = np.concatenate([rng.uniform(-5, 5, (300, 2)), rng.uniform(2, 20, (300, 1)), np.ones((300, 1))], 1)
        u, v, z = CAM.project(pts[:, :3])
        for k in range(1, 4):
            uk, vk, _ = CAM.at_scale(k).project(pts[:, :3])
            inb = (u >= 0) & (u < 64) & (v >= 0) & (v < 48)
            np.testing.assert_array_equal(np.floor(uk[inb]), np.floor(np.floor(u[inb]) / 2**k))
            np.testing.assert_array_equal(np.floor(vk[inb]), np.floor(np.floor(v[inb]) / 2**k))
            for p in pts[inb][:20]:
                d0 = project_depth(p[None], CAM, 0).depth
                dk = project_depth(p[None], CAM, k).depth
                r0, c0 = np.argwhere(np.isfinite(d0))[0]
                assert np.isfinite(dk[r0 >> k, c0 >> k])

    def test_depth_map_rle_roundtrip(self, rng, tmp_path):
        pts = np.concatenate([rng.uniform(-5, 5, (200, 2)), rng.uniform(2, 20, (200, 1)), np.ones((200, 1))], 1)
        dmap = project_depth(pts, CAM, 1)
        write_depth_map(tmp_path / "d.sdm", dmap)
        back = read_depth_map(tmp_path / "d.sdm")
        assert back.scale == 1 and back.depth.shape == dmap.depth.shape
        np.testing.assert_array_equal(np.isfinite(back.depth), np.isfinite(dmap.depth))
        np.testing.assert_allclose(back.depth[back.valid], dmap.depth[dmap.valid], rtol=1e-6)


class TestFormats:
    def test_lpc_roundtrip(self, rng, tmp_path):
        cloud = random_cloud(rng, 33)
        write_lpc(tmp_path / "c.lpc", cloud)
        raw = (tmp_path / "c.lpc").read_bytes()
        assert raw[:4] == b"LPC1" and len(raw) == 8 + 33 * 16
        np.testing.assert_allclose(read_lpc(tmp_path / "c.lpc"), cloud, rtol=1e-6)

    def test_csv_roundtrip(self, rng, tmp_path):
        cloud = random_cloud(rng, 5)
        write_cloud_csv(tmp_path / "c.csv", cloud)
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x,y,z,intensity"
        np.testing.assert_array_equal(read_cloud_csv(tmp_path / "c.csv"), cloud)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(ValueError):
            read_lpc(tmp_path / "x")

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            CameraModel(0.0, 1.0, 0, 0, 10, 10)
        with pytest.raises(ValueError):
            CameraModel(1.0, 1.0, 0, 0, 0, 10)
