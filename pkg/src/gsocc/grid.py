"""Axis-aligned voxel grid description shared by voxelization and splatting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: ``origin`` is the min corner, ``voxel_size`` and ``counts`` per axis."""

    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    counts: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.counts) != 3:
            raise ValueError("grid spec needs three axes")
        if min(self.voxel_size) <= 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel_size}")
        if min(self.counts) <= 0:
            raise ValueError(f"voxel counts must be positive, got {self.counts}")

    @classmethod
    def from_extent(cls, lo, hi, resolution) -> "GridSpec":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        res = np.broadcast_to(np.asarray(resolution, dtype=float), (3,))
        counts = np.rint((hi - lo) / res).astype(int)
        if np.any(np.abs(counts * res - (hi - lo)) > 1e-9):
            raise ValueError("extent span is not a whole number of voxels")
        return cls(tuple(lo), tuple(res), tuple(counts))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.counts))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.voxel_size) * np.asarray(self.counts)

    def same_extent(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.lower - other.lower) <= tol)
                    and np.all(np.abs(self.upper - other.upper) <= tol))

    def centers(self) -> np.ndarray:
        """Voxel centers as a ``(X*Y*Z, 3)`` array in C order."""
        axes = [self.origin[a] + (np.arange(self.counts[a]) + 0.5) * self.voxel_size[a]
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def voxel_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel coordinates of ``points`` and a mask of in-bounds rows."""
        points = np.asarray(points, dtype=float)
        ijk = np.floor((points - self.lower) / np.asarray(self.voxel_size)).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.asarray(self.counts)), axis=1)
        return ijk, inside

    def linear_index(self, ijk: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(ijk).T), self.counts)

    def translated(self, shift) -> "GridSpec":
        return GridSpec(tuple(self.lower + np.asarray(shift, dtype=float)), self.voxel_size, self.counts)

    def refined(self, factor: int) -> "GridSpec":
        return GridSpec(self.origin, tuple(v / factor for v in self.voxel_size),
                        tuple(c * factor for c in self.counts))
