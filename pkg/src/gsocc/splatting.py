"""Gaussian-to-voxel splatting with a hash-grid neighborhood and analytic gradients.

Voxel values are the sum of every Gaussian whose influence radius
``kappa * max(scale)`` reaches the voxel center, accumulated in ascending
Gaussian index, plus a constant background on the empty channel. The
backward pass treats that support set as fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussians import GaussianSet, mahalanobis_sq
from .grid import GridSpec

OGR_MAGIC = b"OGR1"
DEFAULT_KAPPA = 3.0
DEFAULT_B_EMPTY = 1.0

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


@dataclass(frozen=True)
class OccupancyGrid:
    """Dense grid of per-class logits ``(X, Y, Z, C)`` or labels ``(X, Y, Z)``."""

    grid: GridSpec
    values: np.ndarray
    n_classes: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape[:3] != self.grid.counts:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.counts}")
        if v.ndim == 4 and v.shape[3] != self.n_classes:
            raise ValueError("logit channel count must equal n_classes")
        if v.ndim == 3 and v.size and (v.min() < 0 or v.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        if v.ndim not in (3, 4):
            raise ValueError("values must be (X,Y,Z) labels or (X,Y,Z,C) logits")

    @property
    def is_labels(self) -> bool:
        return np.asarray(self.values).ndim == 3

    def labels(self) -> np.ndarray:
        if self.is_labels:
            return np.asarray(self.values, dtype=np.int64)
        return np.argmax(self.values, axis=-1)

    def as_labels(self) -> "OccupancyGrid":
        return OccupancyGrid(self.grid, self.labels(), self.n_classes)


class SpatialIndex:
    """Uniform hash grid mapping cells to the Gaussians whose ball may reach them.

    A Gaussian is registered in every cell overlapped by the bounding box of its
    influence ball (radius ``kappa * max(scale)``), so a cell lookup returns a
    superset of the Gaussians within their radius of any point in the cell.
    With an infinite radius the index degenerates to "all Gaussians everywhere".
    """

    def __init__(self, gaussians: GaussianSet, cell_size: float, kappa: float,
                 bounds: tuple[np.ndarray, np.ndarray] | None = None):
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.kappa = float(kappa)
        self.means = gaussians.means.copy()
        self.n_gaussians = len(gaussians)
        self.radii = (kappa * gaussians.scales.max(axis=1) if self.n_gaussians
                      else np.zeros(0))
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self.origin = np.zeros(3) if bounds is None else self.bounds[0]
        self.unbounded = not np.all(np.isfinite(self.radii))
        if self.unbounded:
            self.keys = np.zeros(0, dtype=np.int64)
            self.starts = np.zeros(1, dtype=np.int64)
            self.ids = np.arange(self.n_gaussians)
            return
        lo = np.floor((self.means - self.radii[:, None] - self.origin) / cell_size).astype(np.int64)
        hi = np.floor((self.means + self.radii[:, None] - self.origin) / cell_size).astype(np.int64)
        if self.bounds is not None:
            top = np.floor((self.bounds[1] - self.origin) / cell_size).astype(np.int64)
            lo = np.clip(lo, 0, top)
            hi = np.clip(hi, 0, top)
            # balls entirely outside the bounds contribute nowhere
            reach = np.all((self.means + self.radii[:, None] >= self.bounds[0])
                           & (self.means - self.radii[:, None] <= self.bounds[1]), axis=1)
        else:
            reach = np.ones(self.n_gaussians, dtype=bool)
        dims = np.where(reach[:, None], hi - lo + 1, 0)
        per = dims.prod(axis=1)
        gid = np.repeat(np.arange(self.n_gaussians), per)
        local = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
        dy, dz = dims[gid, 1], dims[gid, 2]
        cells = lo[gid] + np.stack([local // (dy * dz), (local // dz) % dy, local % dz], axis=1)
        keys = _pack(cells)
        order = np.lexsort((gid, keys))
        keys, gid = keys[order], gid[order]
        first = np.r_[True, keys[1:] != keys[:-1]] if len(keys) else np.zeros(0, dtype=bool)
        self.keys = keys[first]
        self.starts = np.r_[np.flatnonzero(first), len(keys)]
        self.ids = gid

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points, float).reshape(-1, 3) - self.origin) / self.cell_size).astype(np.int64)

    def query(self, x) -> np.ndarray:
        """Candidate Gaussian ids (ascending) for a single point."""
        _, gid = self.candidate_pairs(np.asarray(x, dtype=float).reshape(1, 3))
        return gid

    def candidate_pairs(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All (point, Gaussian) candidate pairs, ordered by point then Gaussian id."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n_p = len(points)
        if self.unbounded:
            return (np.repeat(np.arange(n_p), self.n_gaussians),
                    np.tile(np.arange(self.n_gaussians), n_p))
        if len(self.keys) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        keys = _pack(self.cell_of(points))
        slot = np.searchsorted(self.keys, keys)
        slot_c = np.minimum(slot, len(self.keys) - 1)
        hit = self.keys[slot_c] == keys
        begin = np.where(hit, self.starts[slot_c], 0)
        count = np.where(hit, self.starts[slot_c + 1] - self.starts[slot_c], 0)
        pid = np.repeat(np.arange(n_p), count)
        offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        return pid, self.ids[np.repeat(begin, count) + offs]

    def matches(self, gaussians: GaussianSet) -> bool:
        return len(gaussians) == self.n_gaussians and np.array_equal(gaussians.means, self.means)


def _pack(cells: np.ndarray) -> np.ndarray:
    c = cells + _KEY_OFFSET
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


def build_index(gaussians: GaussianSet, cell_size: float, kappa: float = DEFAULT_KAPPA,
                bounds=None) -> SpatialIndex:
    return SpatialIndex(gaussians, cell_size, kappa, bounds)


def index_for_grid(gaussians: GaussianSet, grid: GridSpec, kappa: float = DEFAULT_KAPPA,
                   cell_size: float | None = None) -> SpatialIndex:
    """Index clipped to ``grid`` with cells twice the largest voxel edge by default."""
    cell_size = cell_size or 2.0 * max(grid.voxel_size)
    return SpatialIndex(gaussians, cell_size, kappa, (grid.lower, grid.upper))


def _support(gaussians: GaussianSet, grid: GridSpec, index: SpatialIndex):
    if not index.matches(gaussians):
        raise ValueError("spatial index was built from different Gaussians")
    if index.bounds is not None and not (np.all(index.bounds[0] <= grid.lower + 1e-9)
                                         and np.all(index.bounds[1] >= grid.upper - 1e-9)):
        raise ValueError("spatial index bounds do not cover the grid")
    centers = grid.centers()
    vid, gid = index.candidate_pairs(centers)
    diff = centers[vid] - gaussians.means[gid]
    if not index.unbounded:
        keep = np.einsum("ij,ij->i", diff, diff) <= index.radii[gid] ** 2
        vid, gid, diff = vid[keep], gid[keep], diff[keep]
    return vid, gid, diff


def splat(gaussians: GaussianSet, grid: GridSpec, index: SpatialIndex | None = None, *,
          kappa: float = DEFAULT_KAPPA, b_empty: float = DEFAULT_B_EMPTY,
          empty_index: int = 0) -> OccupancyGrid:
    """Occupancy logits at every voxel center of ``grid``."""
    n_classes = gaussians.n_classes
    if index is None:
        index = index_for_grid(gaussians, grid, kappa)
    vid, gid, diff = _support(gaussians, grid, index)
    rot = gaussians.rotation_matrices()
    inv_s2 = 1.0 / (gaussians.scales * gaussians.scales)
    q = mahalanobis_sq(diff, rot[gid], inv_s2[gid])
    w = gaussians.opacities[gid] * np.exp(-0.5 * q)
    vals = w[:, None] * gaussians.logits[gid]
    n_vox = grid.n_voxels
    out = np.empty((n_vox, n_classes))
    for c in range(n_classes):
        out[:, c] = np.bincount(vid, weights=vals[:, c], minlength=n_vox)
    out[:, empty_index] += b_empty
    return OccupancyGrid(grid, out.reshape(grid.counts + (n_classes,)), n_classes)


@dataclass
class GaussianGradients:
    """Per-Gaussian gradients; ``rotations`` is w.r.t. the raw (unnormalized) quaternion."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    logits: np.ndarray


def _dR_dq(q: np.ndarray) -> np.ndarray:
    """Jacobian of the rotation matrix w.r.t. a unit quaternion, shape ``(N, 3, 3, 4)``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    rows = [
        [zero, zero, -4 * y, -4 * z],
        [-2 * z, 2 * y, 2 * x, -2 * w],
        [2 * y, 2 * z, 2 * w, 2 * x],
        [2 * z, 2 * y, 2 * x, 2 * w],
        [zero, -4 * x, zero, -4 * z],
        [-2 * x, -2 * w, 2 * z, 2 * y],
        [-2 * y, 2 * z, -2 * w, 2 * x],
        [2 * x, 2 * w, 2 * z, 2 * y],
        [zero, -4 * x, -4 * y, zero],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1).reshape(-1, 3, 3, 4)


def rotation_grad_to_quat(grad_rot: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Chain ``dL/dR`` through ``R(q / |q|)`` to the raw quaternion ``q``."""
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / norm
    g = np.einsum("nij,nijk->nk", grad_rot, _dR_dq(qhat))
    g -= np.sum(g * qhat, axis=1, keepdims=True) * qhat
    return g / norm


def splat_backward(gaussians: GaussianSet, grid: GridSpec, upstream: np.ndarray,
                   index: SpatialIndex | None = None, *,
                   kappa: float = DEFAULT_KAPPA) -> GaussianGradients:
    """Gradients of ``sum(upstream * splat(...))`` w.r.t. every Gaussian property."""
    n, n_classes = len(gaussians), gaussians.n_classes
    upstream = np.asarray(upstream, dtype=float).reshape(grid.n_voxels, n_classes)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream gradient must be finite")
    if index is None:
        index = index_for_grid(gaussians, grid, kappa)
    vid, gid, diff = _support(gaussians, grid, index)

    rot = gaussians.rotation_matrices()
    scales = gaussians.scales
    inv_s2 = 1.0 / (scales * scales)
    rg = rot[gid]
    y = np.einsum("pjk,pj->pk", rg, diff)  # local coordinates R^T d
    q = mahalanobis_sq(diff, rg, inv_s2[gid])
    e = np.exp(-0.5 * q)
    w = gaussians.opacities[gid] * e
    u = upstream[vid]
    a = np.einsum("pc,pc->p", u, gaussians.logits[gid])

    def scatter(values: np.ndarray) -> np.ndarray:
        values = values.reshape(len(gid), -1)
        return np.stack([np.bincount(gid, weights=values[:, k], minlength=n)
                         for k in range(values.shape[1])], axis=1)

    g_logits = scatter(u * w[:, None])
    g_opacity = scatter(a * e)[:, 0]
    gq = -0.5 * a * w
    gy = gq[:, None] * 2.0 * y * inv_s2[gid]
    g_means = -scatter(np.einsum("pjk,pk->pj", rg, gy))
    g_scales = scatter(gq[:, None] * (-2.0) * y * y * inv_s2[gid] / scales[gid])
    g_rot = scatter(diff[:, :, None] * gy[:, None, :]).reshape(n, 3, 3)
    g_quat = rotation_grad_to_quat(g_rot, gaussians.rotations) if n else np.zeros((0, 4))
    return GaussianGradients(g_means, g_quat, g_scales, g_opacity, g_logits)


def write_grid(path, occ: OccupancyGrid) -> None:
    """Binary grid: extent, resolution, counts, class count, mode flag, payload."""
    grid = occ.grid
    mode = 1 if occ.is_labels else 0
    with open(path, "wb") as fh:
        fh.write(OGR_MAGIC)
        fh.write(struct.pack("<6d", *grid.lower, *grid.upper))
        fh.write(struct.pack("<3d", *grid.voxel_size))
        fh.write(struct.pack("<3I", *grid.counts))
        fh.write(struct.pack("<IB", occ.n_classes, mode))
        if mode:
            fh.write(np.asarray(occ.values, dtype="<u2").tobytes())
        else:
            fh.write(np.asarray(occ.values, dtype="<f4").tobytes())


def read_grid(path) -> OccupancyGrid:
    data = Path(path).read_bytes()
    if data[:4] != OGR_MAGIC:
        raise ValueError(f"{path}: not an occupancy grid (bad magic)")
    ext = struct.unpack_from("<6d", data, 4)
    res = struct.unpack_from("<3d", data, 52)
    counts = struct.unpack_from("<3I", data, 76)
    n_classes, mode = struct.unpack_from("<IB", data, 88)
    grid = GridSpec(ext[:3], res, counts)
    n = int(np.prod(counts))
    if mode:
        values = np.frombuffer(data, dtype="<u2", count=n, offset=93).astype(np.int64).reshape(counts)
    else:
        values = np.frombuffer(data, dtype="<f4", count=n * n_classes, offset=93)
        values = values.astype(float).reshape(tuple(counts) + (n_classes,))
    return OccupancyGrid(grid, values, n_classes)


def export_grid_ascii(path, occ: OccupancyGrid, empty_index: int = 0) -> int:
    """Write ``x y z class`` for every non-empty voxel; returns the row count."""
    labels = occ.labels().ravel()
    keep = labels != empty_index
    centers = occ.grid.centers()[keep]
    with open(path, "w") as fh:
        for (x, y, z), c in zip(centers, labels[keep]):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {c}\n")
    return int(keep.sum())
