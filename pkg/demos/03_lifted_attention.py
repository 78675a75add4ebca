"""Depth-weighted feature sampling and one refinement block with random weights.

Run with ``python3 demos/03_lifted_attention.py``.
"""

import numpy as np
from scipy.ndimage import map_coordinates

from gsocc import GaussianSet, attention
from gsocc.lidar import CameraModel, SparseDepthMap, look_at

rng = np.random.default_rng(0)
h, w, d, c = 12, 16, 10, 4
fc = rng.normal(size=(h, w, c))
fd = rng.dirichlet(np.ones(d), size=(h, w))

# Sampling the factored maps equals trilinear interpolation of the outer-product volume.
u, v, k = rng.uniform(-1, w, 5), rng.uniform(-1, h, 5), rng.uniform(-1, d, 5)
fast = attention.sample_uvk(fc, fd, u, v, k)
volume = fd[..., :, None] * fc[..., None, :]  # (H, W, D, C)
slow = np.stack([map_coordinates(volume[..., ch], [v, u, k], order=1, mode="grid-constant")
                 for ch in range(c)], axis=1)
print("max |factored - trilinear|:", np.abs(fast - slow).max())

# One block on a toy camera looking down +x.
cam = CameraModel(8.0, 8.0, 8.0, 6.0, w, h, look_at((0, 0, 0), (5, 0, 0)), "front")
depth = np.where(rng.uniform(size=(h, w)) < 0.3, rng.uniform(2, 8, size=(h, w)), np.nan)
levels = [(attention.FeatureMap(fc, 0),
           attention.build_depth_distribution(SparseDepthMap(depth, 0), d, 10.0))]

n, n_classes = 20, 3
g = GaussianSet(rng.uniform((2, -2, -1), (8, 2, 1), size=(n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                np.full((n, 3), 0.4), np.full(n, 0.5), np.zeros((n, n_classes)))
dims = attention.BlockDims(query_dim=8, feature_dim=c, hidden_dim=16, n_classes=n_classes,
                           n_cameras=1, n_scales=1)
q0 = attention.init_queries(n, dims.query_dim, seed=0)

zero = attention.zero_block_weights(dims)
g_same, _ = attention.run_blocks(g, q0, [cam], [levels], 1, [zero])
print("zero weights leave Gaussians unchanged:", g_same.equals(g))

rand = attention.random_block_weights(dims, seed=1)
g_new, q_new = attention.run_blocks(g, q0, [cam], [levels], 2, [rand, rand])
print("mean shift after two blocks:", np.abs(g_new.means - g.means).max())
print("query norm before/after: %.3f %.3f" % (np.linalg.norm(q0), np.linalg.norm(q_new)))
