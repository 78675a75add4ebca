"""Simulate LiDAR on a small synthetic scene, voxelize it and seed Gaussians.

Run with ``python3 demos/02_lidar_to_gaussians.py``.
"""

import numpy as np

from gsocc import GridSpec, lidar, scenes
from gsocc.config import KeyValueConfig
from gsocc.initialization import InitConfig, init_gaussians

SCENE = """
classes = empty ground vehicle
extent = -8 8 -8 8 -2 2
resolution = 0.5
seed = 3
primitive = plane height=-1.5 class=ground
primitive = box center=3,0,-0.5 size=2,2,2 class=vehicle
lidar.beams = 16
lidar.elevation = -25 5
sweep = position=0,0,0 yaw=0 time=0
sweep = position=-1,0,0 yaw=0 time=1
camera = name=front width=32 height=24 fx=16 position=0,0,0 target=5,0,-0.5
pyramid.feature_dim = 4
"""

spec = scenes.scene_spec_from_config(KeyValueConfig.parse(SCENE, "<demo>"))
sweeps = scenes.simulate_lidar(spec)
print("returns per sweep:", [len(s.points) for s in sweeps.sweeps])

# Bring every sweep into the reference frame and rescale intensity to [0, 1].
cloud = lidar.normalize_intensity(lidar.aggregate_sweeps(sweeps))
print("aggregated cloud", cloud.shape, "intensity range", cloud[:, 3].min(), cloud[:, 3].max())

grid = GridSpec.from_extent(spec.grid.lower, spec.grid.upper, 0.5)
voxels = lidar.voxelize(cloud, grid)
print("non-empty voxels:", len(voxels), "of", grid.n_voxels)

# Shuffling the points does not change the voxel features.
again = lidar.voxelize(cloud[np.random.default_rng(1).permutation(len(cloud))], grid)
print("order invariant:", np.allclose(voxels.mean_positions, again.mean_positions, rtol=0, atol=1e-12))

for n in (64, len(voxels) + 50):
    g = init_gaussians(voxels, InitConfig(n_gaussians=n, n_classes=spec.n_classes, rng_seed=0), grid)
    print(f"{n} Gaussians, opacity range [{g.opacities.min():.2f}, {g.opacities.max():.2f}]")

# A sparse depth map from the camera.
dmap = lidar.project_depth(cloud, spec.cameras[0])
print("depth map", dmap.depth.shape, "valid pixels", int(dmap.valid.sum()))
