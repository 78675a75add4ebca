"""LiDAR sweep aggregation, mean-feature voxelization and depth-map projection."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridSpec

LPC_MAGIC = b"LPC1"
SDM_MAGIC = b"SDM1"

DEFAULT_VOXEL_SIZE = (0.075, 0.075, 0.2)
DEFAULT_N_SWEEPS = 10


def check_rigid(pose: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (4, 4):
        raise ValueError("pose must be a 4x4 homogeneous transform")
    rot = pose[:3, :3]
    if (np.abs(rot @ rot.T - np.eye(3)).max() > tol or abs(np.linalg.det(rot) - 1) > tol
            or not np.allclose(pose[3], [0, 0, 0, 1])):
        raise ValueError("pose is not a rigid transform")
    return pose


def make_pose(rotation=None, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    pose = np.eye(4)
    if rotation is not None:
        pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Sweep:
    points: np.ndarray  # (N, 4): x, y, z, intensity in the sensor frame
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # sensor -> reference
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 4)
        if np.any(pts[:, 3] < 0):
            raise ValueError("intensity must be non-negative")
        pose = check_rigid(np.array(self.pose, dtype=float))
        pts.setflags(write=False)
        pose.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pose", pose)


@dataclass(frozen=True)
class LidarSweepSet:
    sweeps: tuple[Sweep, ...]

    def __post_init__(self):
        object.__setattr__(self, "sweeps", tuple(self.sweeps))

    def latest(self, n: int = DEFAULT_N_SWEEPS) -> "LidarSweepSet":
        """The ``n`` most recent sweeps by timestamp."""
        order = sorted(range(len(self.sweeps)), key=lambda i: self.sweeps[i].timestamp)
        return LidarSweepSet(tuple(self.sweeps[i] for i in order[-n:]))


def transform_points(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return points @ pose[:3, :3].T + pose[:3, 3]


def aggregate_sweeps(sweeps: LidarSweepSet) -> np.ndarray:
    """Concatenate all sweeps in the reference frame; returns ``(N, 4)``."""
    if not sweeps.sweeps:
        raise ValueError("sweep set is empty")
    parts = []
    for sweep in sweeps.sweeps:
        out = sweep.points.copy()
        out[:, :3] = transform_points(sweep.points[:, :3], sweep.pose)
        parts.append(out)
    return np.concatenate(parts, axis=0)


def normalize_intensity(cloud: np.ndarray) -> np.ndarray:
    """Min-max normalize the intensity column to ``[0, 1]`` (constant -> 1)."""
    cloud = np.array(cloud, dtype=float)
    if len(cloud) == 0:
        return cloud
    eta = cloud[:, 3]
    lo, hi = eta.min(), eta.max()
    cloud[:, 3] = (eta - lo) / (hi - lo) if hi > lo else 1.0
    return cloud


@dataclass(frozen=True)
class VoxelFeatureSet:
    """Non-empty voxels sorted by linear index, with mean position/intensity and counts."""

    grid: GridSpec
    indices: np.ndarray  # (N_v, 3) int
    mean_positions: np.ndarray  # (N_v, 3)
    mean_intensities: np.ndarray  # (N_v,)
    counts: np.ndarray  # (N_v,)

    def __len__(self):
        return self.indices.shape[0]

    def entry(self, ijk) -> tuple[np.ndarray, float, int]:
        key = self.grid.linear_index(np.asarray(ijk).reshape(1, 3))[0]
        pos = np.searchsorted(self.grid.linear_index(self.indices), key)
        if pos >= len(self) or not np.array_equal(self.indices[pos], ijk):
            raise KeyError(tuple(ijk))
        return self.mean_positions[pos], float(self.mean_intensities[pos]), int(self.counts[pos])


def voxelize(cloud: np.ndarray, grid: GridSpec) -> VoxelFeatureSet:
    """Group in-bounds points by voxel and average position and intensity.

    Points are summed in voxel-local coordinates (offset from the voxel's min
    corner) in float64, which keeps the mean independent of input order to
    well below 1e-9 relative. Means are clamped into their voxel's bounds.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 4)
    ijk, inside = grid.voxel_index(cloud[:, :3])
    cloud, ijk = cloud[inside], ijk[inside]
    if len(cloud) == 0:
        return VoxelFeatureSet(grid, np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)),
                               np.zeros(0), np.zeros(0, dtype=np.int64))
    keys = grid.linear_index(ijk)
    order = np.argsort(keys, kind="stable")
    keys, ijk, cloud = keys[order], ijk[order], cloud[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    counts = np.diff(np.r_[starts, len(keys)])
    size = np.asarray(grid.voxel_size)
    corner = grid.lower + ijk * size
    local = np.concatenate([cloud[:, :3] - corner, cloud[:, 3:4]], axis=1)
    sums = _segment_sum(local, keys, starts)
    vox_ijk = ijk[starts]
    vox_corner = grid.lower + vox_ijk * size
    mean_local = sums[:, :3] / counts[:, None]
    mean_pos = np.clip(vox_corner + mean_local, vox_corner, vox_corner + size)
    mean_eta = sums[:, 3] / counts
    return VoxelFeatureSet(grid, vox_ijk, mean_pos, mean_eta, counts)


def _segment_sum(values: np.ndarray, keys: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Per-segment column sums, order-independent within each segment.

    Rows are lexicographically sorted within their segment before a
    compensated (Kahan) running sum, so any permutation of the input gives
    identical results.
    """
    order = np.lexsort(tuple(values[:, c] for c in reversed(range(values.shape[1]))) + (keys,))
    values = values[order]
    counts = np.diff(np.r_[starts, len(values)])
    total = np.zeros((len(starts), values.shape[1]))
    comp = np.zeros_like(total)
    seg = np.repeat(np.arange(len(starts)), counts)
    rank = np.arange(len(values)) - np.repeat(starts, counts)
    for r in range(int(counts.max())):
        sel = rank == r
        s = seg[sel]
        y = values[sel] - comp[s]
        t = total[s] + y
        comp[s] = (t - total[s]) - y
        total[s] = t
    return total


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: np.ndarray = field(default_factory=lambda: np.eye(4))  # reference -> camera
    name: str = "cam"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        ext = check_rigid(np.array(self.extrinsics, dtype=float))
        ext.setflags(write=False)
        object.__setattr__(self, "extrinsics", ext)

    def at_scale(self, scale: int) -> "CameraModel":
        """Intrinsics halved per pyramid level; image size floor-divided."""
        if scale < 0:
            raise ValueError("scale must be non-negative")
        f = 2.0 ** -scale
        return CameraModel(self.fx * f, self.fy * f, self.cx * f, self.cy * f,
                           max(self.width >> scale, 1), max(self.height >> scale, 1),
                           self.extrinsics, self.name)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return transform_points(np.asarray(points, dtype=float).reshape(-1, 3), self.extrinsics)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous image coordinates ``(u, v)`` and camera-frame depth ``z``."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origin and unit directions (reference frame) through each pixel center, row-major."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        u = cols.ravel() + 0.5
        v = rows.ravel() + 0.5
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=1)
        cam_to_ref = np.linalg.inv(self.extrinsics)
        dirs = d_cam @ cam_to_ref[:3, :3].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cam_to_ref[:3, 3].copy(), dirs


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Reference->camera extrinsics for a camera (x right, y down, z forward)."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in reference frame
    return make_pose(rot, -rot @ position)


@dataclass(frozen=True)
class SparseDepthMap:
    """Per-pixel depth at one pyramid scale; NaN marks pixels without a return."""

    depth: np.ndarray  # (H, W)
    scale: int = 0

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


def project_depth(cloud: np.ndarray, camera: CameraModel, scale: int = 0,
                  d_max: float = np.inf) -> SparseDepthMap:
    """Z-buffered projection of ``cloud`` (``(N, 3+)``) into ``camera`` at ``scale``.

    Pixel ``(row, col)`` receives points with ``floor(v) == row`` and
    ``floor(u) == col``; the minimum positive depth wins. Points behind the
    camera, outside the image or beyond ``d_max`` are dropped.
    """
    cam = camera.at_scale(scale)
    depth = np.full((cam.height, cam.width), np.inf)
    cloud = np.asarray(cloud, dtype=float)
    if len(cloud):
        u, v, z = cam.project(cloud[:, :3])
        ok = (z > 0) & (z <= d_max) & np.isfinite(u) & np.isfinite(v)
        col = np.floor(u[ok]).astype(np.int64)
        row = np.floor(v[ok]).astype(np.int64)
        z = z[ok]
        inb = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        np.minimum.at(depth, (row[inb], col[inb]), z[inb])
    depth[~np.isfinite(depth)] = np.nan
    return SparseDepthMap(depth, scale)


def write_lpc(path, cloud: np.ndarray) -> None:
    cloud = np.asarray(cloud, dtype="<f4").reshape(-1, 4)
    with open(path, "wb") as fh:
        fh.write(LPC_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(cloud.tobytes())


def read_lpc(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LPC_MAGIC:
        raise ValueError(f"{path}: not a point cloud file (bad magic)")
    (count,) = struct.unpack_from("<I", data, 4)
    return np.frombuffer(data, dtype="<f4", count=4 * count, offset=8).reshape(count, 4).astype(float)


def write_cloud_csv(path, cloud: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "intensity"])
        writer.writerows(np.asarray(cloud, dtype=float).reshape(-1, 4).tolist())


def read_cloud_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [[float(r["x"]), float(r["y"]), float(r["z"]), float(r["intensity"])] for r in reader]
    return np.asarray(rows, dtype=float).reshape(-1, 4)


def write_depth_map(path, dmap: SparseDepthMap) -> None:
    """Header (magic, scale, width, height, run count), then runs.

    Each run is ``uint32 length, uint8 present`` followed by ``length`` float32
    depths when present. Pixels are visited row-major.
    """
    flat = dmap.depth.ravel()
    present = np.isfinite(flat)
    edges = np.flatnonzero(np.r_[True, present[1:] != present[:-1], True])
    chunks = []
    for a, b in zip(edges[:-1], edges[1:]):
        flag = bool(present[a])
        chunks.append(struct.pack("<IB", int(b - a), flag))
        if flag:
            chunks.append(flat[a:b].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(SDM_MAGIC)
        fh.write(struct.pack("<IIII", dmap.scale, dmap.width, dmap.height, len(edges) - 1))
        fh.write(b"".join(chunks))


def read_depth_map(path) -> SparseDepthMap:
    data = Path(path).read_bytes()
    if data[:4] != SDM_MAGIC:
        raise ValueError(f"{path}: not a depth map file (bad magic)")
    scale, width, height, n_runs = struct.unpack_from("<IIII", data, 4)
    flat = np.full(width * height, np.nan)
    off, pos = 20, 0
    for _ in range(n_runs):
        length, flag = struct.unpack_from("<IB", data, off)
        off += 5
        if flag:
            flat[pos:pos + length] = np.frombuffer(data, dtype="<f4", count=length, offset=off)
            off += 4 * length
        pos += length
    return SparseDepthMap(flat.reshape(height, width), scale)
