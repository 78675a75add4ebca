import numpy as np
import pytest

from gsocc.config import ConfigError, KeyValueConfig
from gsocc.gaussians import ClassSet
from gsocc.grid import GridSpec
from gsocc.lidar import CameraModel, aggregate_sweeps, look_at
from gsocc.scenes import (MARCH_TOL, LidarConfig, Primitive, SceneSpec, SweepPose, avg_pool2, cast_rays,
                          class_codebook, rasterize_gt, render_camera, render_feature_pyramid,
                          scene_spec_from_config, simulate_lidar)

CLASSES = ClassSet(("empty", "ground", "car", "tree"), 0)
GRID = GridSpec.from_extent((-8, -8, -2), (8, 8, 2), 0.5)
LIDAR = LidarConfig(beams=16, azimuth_res_deg=4.0, elevation_deg=(-25.0, 5.0), max_range=30.0, noise=0.0)


def aligned_spec(**kw):
    prims = (Primitive("plane", (0, 0, -1.5), (0, 0, 0), 1),
             Primitive("box", (3.0, 2.0, -0.5), (2.0, 3.0, 2.0), 2),
             Primitive("box", (-4.0, -3.0, -0.5), (1.0, 1.0, 2.0), 3))
    args = dict(classes=CLASSES, grid=GRID, primitives=prims, lidar=LIDAR,
                sweeps=(SweepPose((0, 0, 0.5)), SweepPose((1.0, -1.0, 0.5), 30.0, 1.0)), rng_seed=3)
    args.update(kw)
    return SceneSpec(**args)


class TestPrimitives:
    def test_box_sdf(self):
        box = Primitive("box", (0, 0, 0), (2, 2, 2), 1)
        assert box.sdf(np.array([[3.0, 0, 0], [0, 0, 0], [2, 2, 1]])) == pytest.approx([2.0, -1.0, np.sqrt(2)])

    def test_yawed_box_contains(self):
        box = Primitive("box", (0, 0, 0), (4, 1, 1), 1, yaw=np.pi / 2)
        assert box.contains(np.array([[0, 1.5, 0]]))[0] and not box.contains(np.array([[1.5, 0, 0]]))[0]

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            Primitive("cone", (0, 0, 0), (1, 1, 1), 1)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(CLASSES, GRID, (Primitive("box", (7.9, 0, 0), (1, 1, 1), 2),))
        with pytest.raises(ValueError):
            SceneSpec(CLASSES, GRID, (Primitive("box", (0, 0, 0), (1, 1, 1), 0),))


class TestRasterize:
    def test_box_voxel_count(self):
        labels = rasterize_gt(aligned_spec()).labels()
        assert np.sum(labels == 2) == 4 * 6 * 4
        assert np.sum(labels == 3) == 2 * 2 * 4
        assert np.sum(labels == 1) == 32 * 32 * 1

    def test_later_primitive_wins(self):
        prims = (Primitive("box", (0, 0, 0), (2, 2, 2), 2), Primitive("box", (0, 0, 0), (1, 1, 1), 3))
        labels = rasterize_gt(SceneSpec(CLASSES, GRID, prims)).labels()
        assert np.sum(labels == 3) == 8 and np.sum(labels == 2) == 64 - 8

    def test_sphere_volume_bound(self):
        r = 2.0
        labels = rasterize_gt(SceneSpec(CLASSES, GRID, (Primitive("sphere", (0.1, 0.2, 0.0), (r, r, r), 3),))).labels()
        vol = np.sum(labels == 3) * 0.125
        # voxels with centres inside the ball lie between the balls of radius r -/+ half the voxel diagonal
        half_diag = 0.5 * np.sqrt(3) * 0.5
        assert 4 / 3 * np.pi * (r - half_diag) ** 3 <= vol <= 4 / 3 * np.pi * (r + half_diag) ** 3

    def test_no_primitives_all_empty(self):
        assert np.all(rasterize_gt(SceneSpec(CLASSES, GRID)).labels() == 0)


class TestLidar:
    def test_hits_on_surface(self):
        spec = aligned_spec()
        sweeps, ids = simulate_lidar(spec, return_ids=True)
        for sw, prim in zip(sweeps.sweeps, ids):
            world = sw.points[:, :3] @ sw.pose[:3, :3].T + sw.pose[:3, 3]
            for k, p in enumerate(spec.primitives):
                d = p.sdf(world[prim == k])
                assert np.all(np.abs(d) <= MARCH_TOL) and np.all(d <= 0)

    def test_box_face_at_depth(self):
        spec = SceneSpec(CLASSES, GRID, (Primitive("box", (6.0, 0, 0), (2.0, 6.0, 3.0), 2),),
                         lidar=LidarConfig(beams=1, azimuth_res_deg=90.0, elevation_deg=(0.0, 0.0), noise=0.0))
        pts = simulate_lidar(spec).sweeps[0].points
        assert len(pts) == 1
        assert pts[0, 0] == pytest.approx(5.0, abs=MARCH_TOL)

    def test_no_primitives_no_returns(self):
        assert len(simulate_lidar(SceneSpec(CLASSES, GRID, lidar=LIDAR)).sweeps[0].points) == 0

    def test_returns_fall_in_labelled_voxels(self):
        spec = aligned_spec()
        labels = rasterize_gt(spec).labels()
        sweeps, ids = simulate_lidar(spec, return_ids=True)
        cloud = aggregate_sweeps(sweeps)
        prim = np.concatenate(ids)
        ijk, inside = GRID.voxel_index(cloud[:, :3])
        want = np.array([spec.primitives[k].class_index for k in prim])
        assert inside.sum() > 100
        np.testing.assert_array_equal(labels[tuple(ijk[inside].T)], want[inside])

    def test_sphere_returns_near_labelled_voxels(self):
        spec = SceneSpec(CLASSES, GRID, (Primitive("sphere", (3.1, 0.3, 0.0), (1.3, 1.3, 1.3), 3),), lidar=LIDAR)
        labels = rasterize_gt(spec).labels()
        cloud = aggregate_sweeps(simulate_lidar(spec))
        ijk, inside = GRID.voxel_index(cloud[:, :3])
        assert inside.all() and len(cloud) > 10
        padded = np.pad(labels == 3, 1)
        for i, j, k in ijk:
            assert padded[i:i + 3, j:j + 3, k:k + 3].any()

    def test_intensity_and_determinism(self):
        spec = aligned_spec()
        a, ids = simulate_lidar(spec, return_ids=True)
        b = simulate_lidar(spec)
        table = spec.intensity_table()
        for sa, sb, prim in zip(a.sweeps, b.sweeps, ids):
            np.testing.assert_array_equal(sa.points, sb.points)
            cls = [spec.primitives[k].class_index for k in prim]
            np.testing.assert_allclose(sa.points[:, 3], table[cls])

    def test_cast_rays_miss(self):
        pts, t, prim = cast_rays(np.zeros(3), np.array([[0, 0, 1.0]]), (Primitive("plane", (0, 0, -1), (0, 0, 0), 1),), 50)
        assert prim[0] == -1 and np.isinf(t[0]) and np.isnan(pts[0]).all()


class TestCameras:
    CAM = CameraModel(8.0, 8.0, 8.0, 6.0, 16, 12, look_at((0, 0, 0.5), (10, 0, 0.5)))

    def test_sky_is_zero_and_objects_have_codebook_rows(self):
        spec = aligned_spec(cameras=(self.CAM,), feature_dim=8, n_scales=3)
        prim, depth = render_camera(spec, self.CAM)
        feats = render_feature_pyramid(spec, self.CAM)
        book = class_codebook(4, 8)
        sky = prim == -1
        assert sky.any() and (~sky).any()
        np.testing.assert_array_equal(feats[0].features[sky], 0.0)
        assert np.all(np.isnan(depth[sky]))
        r, c = np.argwhere(~sky)[0]
        np.testing.assert_array_equal(feats[0].features[r, c], book[spec.primitives[prim[r, c]].class_index])
        assert [f.features.shape[:2] for f in feats] == [(12, 16), (6, 8), (3, 4)]

    def test_codebook_orthonormal(self):
        book = class_codebook(4, 8)
        np.testing.assert_allclose(book @ book.T, np.eye(4), atol=1e-12)
        with pytest.raises(ValueError):
            class_codebook(5, 4)

    def test_avg_pool_oracle(self, rng):
        x = rng.normal(size=(6, 8, 3))
        want = np.array([[x[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1)) for j in range(4)] for i in range(3)])
        np.testing.assert_allclose(avg_pool2(x), want, rtol=1e-14)


class TestConfig:
    TEXT = """
classes = empty ground car
extent = -4 4 -4 4 -2 2
resolution = 0.5
primitive = plane height=-1.5 class=ground
primitive = box center=1,1,0 size=2,2,2 class=car yaw=30
camera = name=front width=32 height=24 fx=16 position=0,0,0 target=5,0,0
sweep = position=0,0,0.5
lidar.beams = 8
"""

    def test_parse(self):
        spec = scene_spec_from_config(KeyValueConfig.parse(self.TEXT))
        assert spec.classes.names == ("empty", "ground", "car")
        assert spec.grid.counts == (16, 16, 8)
        assert spec.primitives[1].yaw == pytest.approx(np.pi / 6)
        assert spec.cameras[0].name == "front" and spec.lidar.beams == 8

    def test_missing_classes(self):
        with pytest.raises(ConfigError, match="classes"):
            scene_spec_from_config(KeyValueConfig.parse("extent = -4 4 -4 4 -2 2\n"))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            scene_spec_from_config(KeyValueConfig.parse(self.TEXT + "bogus = 1\n"))

    def test_unknown_class(self):
        with pytest.raises(ConfigError):
            scene_spec_from_config(KeyValueConfig.parse(self.TEXT + "primitive = sphere center=0,0,0 radius=1 class=dog\n"))
