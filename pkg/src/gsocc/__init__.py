"""Gaussian-based semantic occupancy kernels: LiDAR voxelization, voxel-to-Gaussian
initialization, lifted depth x feature sampling, splatting with analytic gradients,
losses and metrics, plus synthetic scenes for testing them."""

from .gaussians import (ClassSet, Covariance, GaussianSet, SemanticGaussian, covariance,
                        gaussian_eval, quat_to_rot)
from .grid import GridSpec
from .splatting import OccupancyGrid, build_index, splat, splat_backward

__version__ = "0.1.0"

__all__ = [
    "ClassSet", "Covariance", "GaussianSet", "GridSpec", "OccupancyGrid", "SemanticGaussian",
    "build_index", "covariance", "gaussian_eval", "quat_to_rot", "splat", "splat_backward",
]
