"""Voxel-to-Gaussian initialization.

LiDAR voxels seed Gaussian means (voxel mean position) and opacities (voxel
mean intensity). With more voxels than Gaussians a random subset of voxels is
used; with fewer, a random subset of Gaussians is seeded and the rest keep
default properties with means drawn uniformly inside the target extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import S_MIN, GaussianSet
from .grid import GridSpec
from .lidar import DEFAULT_VOXEL_SIZE, VoxelFeatureSet

DEFAULT_N_GAUSSIANS = 25_600


@dataclass(frozen=True)
class InitConfig:
    n_gaussians: int = DEFAULT_N_GAUSSIANS
    n_classes: int = 2
    default_scale: tuple[float, float, float] = DEFAULT_VOXEL_SIZE
    default_rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    default_logits: tuple[float, ...] | None = None  # zeros when None
    default_opacity: float = 0.5
    rng_seed: int = 0
    allow_default_fallback: bool = True

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be at least 1")
        if min(self.default_scale) < S_MIN:
            raise ValueError("default_scale below the scale floor")
        if self.default_logits is not None and len(self.default_logits) != self.n_classes:
            raise ValueError("default_logits length must equal n_classes")

    @property
    def logits(self) -> np.ndarray:
        if self.default_logits is None:
            return np.zeros(self.n_classes)
        return np.asarray(self.default_logits, dtype=float)


def partial_shuffle(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First ``k`` entries of a Fisher-Yates shuffle of ``range(n)``."""
    perm = np.arange(n)
    for i in range(k):
        j = i + int(rng.integers(n - i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]


def assign_voxels(n_voxels: int, n_gaussians: int, rng: np.random.Generator) -> np.ndarray:
    """Voxel index seeding each Gaussian slot, ``-1`` for default slots."""
    if n_voxels >= n_gaussians:
        return partial_shuffle(n_voxels, n_gaussians, rng)
    assignment = np.full(n_gaussians, -1, dtype=np.int64)
    slots = partial_shuffle(n_gaussians, n_voxels, rng)
    assignment[slots] = np.arange(n_voxels)
    return assignment


def init_gaussians(voxels: VoxelFeatureSet, cfg: InitConfig,
                   extent: GridSpec | None = None) -> GaussianSet:
    """Build ``cfg.n_gaussians`` Gaussians seeded from ``voxels``.

    ``extent`` bounds the uniform draw for unseeded means and defaults to the
    voxel grid's extent.
    """
    gaussians, _ = init_gaussians_with_assignment(voxels, cfg, extent)
    return gaussians


def init_gaussians_with_assignment(voxels: VoxelFeatureSet, cfg: InitConfig,
                                   extent: GridSpec | None = None):
    n_v, n_g = len(voxels), cfg.n_gaussians
    if n_v == 0 and not cfg.allow_default_fallback:
        raise ValueError("no non-empty voxels and default fallback disabled")
    rng = np.random.default_rng(cfg.rng_seed)
    assignment = assign_voxels(n_v, n_g, rng)
    seeded = assignment >= 0

    extent = extent or voxels.grid
    means = rng.uniform(extent.lower, extent.upper, size=(n_g, 3))
    opacities = np.full(n_g, float(cfg.default_opacity))
    means[seeded] = voxels.mean_positions[assignment[seeded]]
    opacities[seeded] = np.clip(voxels.mean_intensities[assignment[seeded]], 0.0, 1.0)

    gaussians = GaussianSet(
        means,
        np.tile(np.asarray(cfg.default_rotation, dtype=float), (n_g, 1)),
        np.tile(np.asarray(cfg.default_scale, dtype=float), (n_g, 1)),
        opacities,
        np.tile(cfg.logits, (n_g, 1)),
    )
    return gaussians, assignment
