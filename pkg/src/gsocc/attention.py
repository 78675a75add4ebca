"""LiDAR-guided 3D deformable attention over a factored depth x feature space.

The lifted volume ``F3D[h, w, k, :] = Fd[h, w, k] * Fc[h, w, :]`` is never
built. Trilinear sampling of it reduces to a bilinear sum over the four pixel
neighbours of ``(pixel weight) * (depth distribution interpolated at k) *
(feature)``, which is what :func:`sample_uvk` computes.

Coordinate conventions
----------------------
* Camera projection yields continuous image coordinates where pixel ``j``
  spans ``[j, j + 1)``.
* Sampling uses array coordinates where pixel ``j`` sits at integer ``j``;
  the two differ by half a pixel.
* Depth is addressed by a continuous bin coordinate with bin ``k`` centred at
  integer ``k``.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, softmax

from .gaussians import S_MIN, GaussianSet
from .lidar import CameraModel, SparseDepthMap

GW3D_MAGIC = b"GW3D"
DEFAULT_D_MAX = 51.2
DEFAULT_BINS = 64
DEFAULT_N_R1 = 4
DEFAULT_N_R2 = 2
DEFAULT_N_SCALES = 4
DEFAULT_Z_NEAR = 0.1

NEIGHBOR_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13


@dataclass(frozen=True)
class DepthDistributionMap:
    probs: np.ndarray  # (H, W, D)
    edges: np.ndarray  # (D + 1,) monotone depths
    scale: int = 0

    @property
    def n_bins(self) -> int:
        return self.probs.shape[2]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def bin_coordinate(self, depth) -> np.ndarray:
        return depth_to_bin(depth, self.edges)


@dataclass(frozen=True)
class FeatureMap:
    features: np.ndarray  # (H, W, C)
    scale: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.features.shape[2]


def linear_bin_edges(n_bins: int, d_max: float) -> np.ndarray:
    return np.linspace(0.0, d_max, n_bins + 1)


def depth_to_bin(depth, edges: np.ndarray) -> np.ndarray:
    """Continuous bin coordinate, piecewise linear through bin centres and extrapolated."""
    centers = 0.5 * (edges[:-1] + edges[1:])
    depth = np.asarray(depth, dtype=float)
    idx = np.clip(np.searchsorted(centers, depth) - 1, 0, len(centers) - 2)
    return idx + (depth - centers[idx]) / (centers[idx + 1] - centers[idx])


def depth_to_bin_slope(depth, edges: np.ndarray) -> np.ndarray:
    centers = 0.5 * (edges[:-1] + edges[1:])
    idx = np.clip(np.searchsorted(centers, np.asarray(depth, float)) - 1, 0, len(centers) - 2)
    return 1.0 / (centers[idx + 1] - centers[idx])


def build_depth_distribution(sparse: SparseDepthMap, n_bins: int = DEFAULT_BINS,
                             d_max: float = DEFAULT_D_MAX, edges=None) -> DepthDistributionMap:
    """One-hot bin of each LiDAR depth; pixels without a usable depth get ``1 / D``."""
    if n_bins < 2:
        raise ValueError("need at least two depth bins")
    edges = linear_bin_edges(n_bins, d_max) if edges is None else np.asarray(edges, float)
    if len(edges) != n_bins + 1 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be D+1 increasing depths")
    depth = sparse.depth
    valid = np.isfinite(depth) & (depth > 0) & (depth <= edges[-1])
    probs = np.full(depth.shape + (n_bins,), 1.0 / n_bins)
    b = np.clip(np.searchsorted(edges, depth[valid], side="right") - 1, 0, n_bins - 1)
    rows, cols = np.nonzero(valid)
    probs[rows, cols, :] = 0.0
    probs[rows, cols, b] = 1.0
    return DepthDistributionMap(probs, edges, sparse.scale)


def _check_coords(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("sampling coordinates must be finite")


SAMPLE_CHUNK = 4096  # points per pass; bounds temporaries to O(chunk * C)


def sample_uvk(fc: np.ndarray, fd: np.ndarray, u, v, k, with_grad: bool = False):
    """Depth-weighted bilinear sampling at array coordinates ``(u, v)`` and bin ``k``.

    ``fc`` is ``(H, W, C)`` and ``fd`` is ``(H, W, D)``; the coordinates are
    equal-length 1-D arrays. Out-of-range neighbours contribute zero. With
    ``with_grad`` the derivatives w.r.t. ``(u, v, k)`` are returned as a
    ``(P, C, 3)`` array, taken one-sided from the cell containing the point.
    """
    u, v, k = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (u, v, k))
    _check_coords(u, v, k)
    out = np.zeros((len(u), fc.shape[2]))
    grad = np.zeros((len(u), fc.shape[2], 3)) if with_grad else None
    for lo in range(0, len(u), SAMPLE_CHUNK):
        sl = slice(lo, lo + SAMPLE_CHUNK)
        _sample_chunk(fc, fd, u[sl], v[sl], k[sl], out[sl], None if grad is None else grad[sl])
    return (out, grad) if with_grad else out


def _sample_chunk(fc, fd, u, v, k, out, grad):
    h, w, _ = fc.shape
    n_d = fd.shape[2]
    u0, v0, k0 = np.floor(u), np.floor(v), np.floor(k)
    fu, fv, fk = u - u0, v - v0, k - k0
    u0, v0, k0 = u0.astype(np.int64), v0.astype(np.int64), k0.astype(np.int64)
    k_lo_ok = (k0 >= 0) & (k0 < n_d)
    k_hi_ok = (k0 + 1 >= 0) & (k0 + 1 < n_d)
    klo = np.clip(k0, 0, n_d - 1)
    khi = np.clip(k0 + 1, 0, n_d - 1)
    for dv, du in ((0, 0), (0, 1), (1, 0), (1, 1)):
        row, col = v0 + dv, u0 + du
        ok = (row >= 0) & (row < h) & (col >= 0) & (col < w)
        r, c = np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)
        wu = fu if du else 1.0 - fu
        wv = fv if dv else 1.0 - fv
        p_lo = np.where(ok & k_lo_ok, fd[r, c, klo], 0.0)
        p_hi = np.where(ok & k_hi_ok, fd[r, c, khi], 0.0)
        depth_w = (1.0 - fk) * p_lo + fk * p_hi
        feat = fc[r, c]  # p_lo and p_hi are already zero off the image
        out += (wu * wv * depth_w)[:, None] * feat
        if grad is not None:
            sign_u = 1.0 if du else -1.0
            sign_v = 1.0 if dv else -1.0
            grad[:, :, 0] += (sign_u * wv * depth_w)[:, None] * feat
            grad[:, :, 1] += (sign_v * wu * depth_w)[:, None] * feat
            grad[:, :, 2] += (wu * wv * (p_hi - p_lo))[:, None] * feat


def sample_3d(fc: FeatureMap, fd: DepthDistributionMap, at) -> np.ndarray:
    """Sample the lifted volume at ``(u, v, depth_m)`` in array coordinates."""
    u, v, d = (float(a) for a in at)
    _check_coords(np.array([u, v, d]))
    k = fd.bin_coordinate(d)
    return sample_uvk(fc.features, fd.probs, [u], [v], [k])[0]


def sample_3d_grad(fc: FeatureMap, fd: DepthDistributionMap, at) -> tuple[np.ndarray, np.ndarray]:
    """Value and ``(C, 3)`` Jacobian w.r.t. ``(u, v, depth_m)``."""
    u, v, d = (float(a) for a in at)
    _check_coords(np.array([u, v, d]))
    k = fd.bin_coordinate(d)
    val, grad = sample_uvk(fc.features, fd.probs, [u], [v], [k], with_grad=True)
    grad = grad[0]
    grad[:, 2] *= depth_to_bin_slope(d, fd.edges)
    return val[0], grad


def project_reference(m, cam: CameraModel, scale: int = 0,
                      z_near: float = DEFAULT_Z_NEAR) -> tuple[float, float, float] | None:
    """Continuous image coordinates and depth of ``m`` at ``scale``, or ``None``."""
    u, v, z, ok = project_points(np.asarray(m, float).reshape(1, 3), cam, scale, z_near)
    return (float(u[0]), float(v[0]), float(z[0])) if ok[0] else None


def project_points(points: np.ndarray, cam: CameraModel, scale: int = 0,
                   z_near: float = DEFAULT_Z_NEAR):
    cam_s = cam.at_scale(scale)
    u, v, z = cam_s.project(points)
    ok = (z > z_near) & (u >= 0) & (u < cam_s.width) & (v >= 0) & (v < cam_s.height)
    return u, v, z, ok


@dataclass(frozen=True)
class SamplingPlan:
    """Batched plan for ``N`` Gaussians.

    ``offsets_3d`` is ``(N, R1, 3)`` metres, ``offsets_uvd`` is ``(N, R1, R2, 3)``
    (pixels at the sampled scale, pixels, bins) and ``weights`` is
    ``(N, N_cam, S, R1, R2)`` summing to one over the last three axes.
    """

    offsets_3d: np.ndarray
    offsets_uvd: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n, r1, _ = self.offsets_3d.shape
        if self.offsets_uvd.shape[:2] != (n, r1) or self.weights.shape[0] != n:
            raise ValueError("plan arrays disagree on N or R1")
        if self.weights.shape[3:] != self.offsets_uvd.shape[1:3]:
            raise ValueError("weights shape does not match offsets")
        if np.any(self.weights < 0):
            raise ValueError("attention weights must be non-negative")
        sums = self.weights.reshape(self.weights.shape[:2] + (-1,)).sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("attention weights must sum to one per camera")

    @property
    def n_r1(self) -> int:
        return self.offsets_3d.shape[1]

    @property
    def n_r2(self) -> int:
        return self.offsets_uvd.shape[2]

    def __getitem__(self, i) -> "SamplingPlan":
        sl = slice(i, i + 1) if isinstance(i, (int, np.integer)) else i
        return SamplingPlan(self.offsets_3d[sl], self.offsets_uvd[sl], self.weights[sl])


def uniform_plan(n: int, n_cameras: int, n_scales: int, n_r1: int = DEFAULT_N_R1,
                 n_r2: int = DEFAULT_N_R2) -> SamplingPlan:
    w = np.full((n, n_cameras, n_scales, n_r1, n_r2), 1.0 / (n_scales * n_r1 * n_r2))
    return SamplingPlan(np.zeros((n, n_r1, 3)), np.zeros((n, n_r1, n_r2, 3)), w)


def gen_reference_points(gaussians: GaussianSet, plan: SamplingPlan) -> np.ndarray:
    """Stage-one reference points ``m + dm_i``, shape ``(N, R1, 3)``."""
    if plan.offsets_3d.shape[0] != len(gaussians):
        raise ValueError("plan is not sized for these Gaussians")
    return gaussians.means[:, None, :] + plan.offsets_3d


Pyramid = Sequence[tuple[FeatureMap, DepthDistributionMap]]


def aggregate_query_updates(gaussians: GaussianSet, plan: SamplingPlan,
                            cameras: Sequence[CameraModel], pyramids: Sequence[Pyramid],
                            value_proj: np.ndarray, z_near: float = DEFAULT_Z_NEAR) -> np.ndarray:
    """Query updates ``(N, m)`` averaged over all cameras (visible or not).

    Sample ``(i, j)`` of camera ``c`` at scale ``s`` sits at the projection of
    reference point ``i`` shifted by stage-two offset ``j``; it is weighted by
    ``plan.weights[:, c, s, i, j]``. References that do not project into a view
    contribute nothing, but the divisor stays the camera count.
    """
    n_cam = len(cameras)
    if len(pyramids) != n_cam or plan.weights.shape[1] != n_cam:
        raise ValueError("cameras, pyramids and plan disagree on camera count")
    n_scales = plan.weights.shape[2]
    value_proj = np.asarray(value_proj, dtype=float)
    for pyramid in pyramids:
        if len(pyramid) < n_scales:
            raise ValueError("pyramid has fewer scales than the plan")
        if any(pyramid[s][0].channels != value_proj.shape[1] for s in range(n_scales)):
            raise ValueError("value projection does not match feature channels")
    refs = gen_reference_points(gaussians, plan)
    n, r1, r2 = len(gaussians), plan.n_r1, plan.n_r2
    acc = np.zeros((n, value_proj.shape[1]))
    step = max(1, SAMPLE_CHUNK // (r1 * r2))
    for lo in range(0, n, step):
        sl = slice(lo, lo + step)
        m = len(refs[sl])
        for c, (cam, pyramid) in enumerate(zip(cameras, pyramids)):
            for s in range(n_scales):
                fc, fd = pyramid[s]
                u, v, z, ok = project_points(refs[sl].reshape(-1, 3), cam, s, z_near)
                if not np.any(ok):
                    continue
                k = np.where(ok, fd.bin_coordinate(np.where(ok, z, 1.0)), 0.0)
                base = np.stack([u - 0.5, v - 0.5, k], axis=1).reshape(m, r1, 1, 3)
                pts = (base + plan.offsets_uvd[sl]).reshape(-1, 3)
                live = np.repeat(ok, r2)
                wts = plan.weights[sl, c, s].reshape(-1)[live]
                feats = sample_uvk(fc.features, fd.probs, pts[live, 0], pts[live, 1], pts[live, 2])
                owner = np.repeat(np.arange(m), r1 * r2)[live]
                for ch in range(feats.shape[1]):
                    acc[lo:lo + m, ch] += np.bincount(owner, weights=wts * feats[:, ch], minlength=m)
    return (acc / n_cam) @ value_proj.T


def aggregate_query_update(gaussian_set: GaussianSet, plan: SamplingPlan, cameras, pyramids,
                           value_proj, z_near: float = DEFAULT_Z_NEAR) -> np.ndarray:
    """Single-Gaussian form of :func:`aggregate_query_updates`; returns an ``m``-vector."""
    if len(gaussian_set) != 1:
        raise ValueError("expected exactly one Gaussian")
    return aggregate_query_updates(gaussian_set, plan, cameras, pyramids, value_proj, z_near)[0]


@dataclass(frozen=True)
class SparseConvWeights:
    cell_size: float
    kernels: np.ndarray  # (27, m, m), offset order of NEIGHBOR_OFFSETS


def sparse_self_encode(gaussians: GaussianSet, queries: np.ndarray,
                       conv: SparseConvWeights) -> np.ndarray:
    """Hash means into cells and mix the mean query of each occupied 3x3x3 neighbour."""
    queries = np.asarray(queries, dtype=float)
    n, m = queries.shape
    if conv.kernels.shape != (27, m, m):
        raise ValueError(f"kernel shape {conv.kernels.shape} does not match query dim {m}")
    if n == 0:
        return queries.copy()
    cells = np.floor(gaussians.means / conv.cell_size).astype(np.int64)
    keys, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    cell_sum = np.zeros((len(keys), m))
    np.add.at(cell_sum, inverse, queries)
    cell_mean = cell_sum / counts[:, None]
    lookup = {tuple(k): i for i, k in enumerate(keys.tolist())}
    out = np.zeros((n, m))
    for o, off in enumerate(NEIGHBOR_OFFSETS):
        kernel = conv.kernels[o]
        if not np.any(kernel):
            continue
        nb = np.array([lookup.get(tuple(c), -1) for c in (keys + off).tolist()])
        per_gauss = nb[inverse]
        hit = per_gauss >= 0
        out[hit] += cell_mean[per_gauss[hit]] @ kernel.T
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class MLPWeights:
    w1: np.ndarray  # (h, m)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)


def mlp_deltas(queries: np.ndarray, mlp: MLPWeights, n_props: int) -> np.ndarray:
    queries = np.asarray(queries, dtype=float)
    if (mlp.w1.shape[1] != queries.shape[1] or mlp.w2.shape != (n_props, mlp.w1.shape[0])
            or mlp.b1.shape != (mlp.w1.shape[0],) or mlp.b2.shape != (n_props,)):
        raise ValueError("MLP weight shapes do not match queries and property count")
    hidden = np.maximum(queries @ mlp.w1.T + mlp.b1, 0.0)
    return hidden @ mlp.w2.T + mlp.b2


def apply_deltas(gaussians: GaussianSet, deltas: np.ndarray) -> GaussianSet:
    """Add deltas to (mean, quaternion, log-scale, opacity logit, logits) and re-constrain.

    Properties whose delta is exactly zero are passed through bit-for-bit.
    """
    d_rot, d_scale, d_op = deltas[:, 3:7], deltas[:, 7:10], deltas[:, 10]
    with np.errstate(divide="ignore"):
        opacity_logit = logit(gaussians.opacities)
    scales = np.maximum(np.exp(np.log(gaussians.scales) + d_scale), gaussians.s_min)
    rot_changed = np.any(d_rot != 0, axis=1, keepdims=True)
    rotations = gaussians.rotations + d_rot
    rotations = np.where(rot_changed, rotations / np.linalg.norm(rotations, axis=1, keepdims=True),
                         gaussians.rotations)
    return gaussians.replace(
        means=gaussians.means + deltas[:, 0:3],
        rotations=rotations,
        scales=np.where(d_scale != 0, scales, gaussians.scales),
        opacities=np.where(d_op != 0, expit(opacity_logit + d_op), gaussians.opacities),
        logits=gaussians.logits + deltas[:, 11:],
    )


def refine(gaussians: GaussianSet, queries: np.ndarray, mlp: MLPWeights) -> GaussianSet:
    n_props = 11 + gaussians.n_classes
    return apply_deltas(gaussians, mlp_deltas(queries, mlp, n_props))


@dataclass(frozen=True)
class PlanHead:
    """Linear heads mapping a query to offsets and per-camera attention logits."""

    w_off3d: np.ndarray  # (R1*3, m)
    b_off3d: np.ndarray
    w_offuvd: np.ndarray  # (R1*R2*3, m)
    b_offuvd: np.ndarray
    w_attn: np.ndarray  # (N_cam*S*R1*R2, m)
    b_attn: np.ndarray


def make_plan(queries: np.ndarray, head: PlanHead, n_cameras: int, n_scales: int,
              n_r1: int, n_r2: int) -> SamplingPlan:
    n = len(queries)
    off3 = (queries @ head.w_off3d.T + head.b_off3d).reshape(n, n_r1, 3)
    offuvd = (queries @ head.w_offuvd.T + head.b_offuvd).reshape(n, n_r1, n_r2, 3)
    logits_ = (queries @ head.w_attn.T + head.b_attn).reshape(n, n_cameras, -1)
    weights = softmax(logits_, axis=2).reshape(n, n_cameras, n_scales, n_r1, n_r2)
    return SamplingPlan(off3, offuvd, weights)


@dataclass(frozen=True)
class BlockDims:
    query_dim: int
    feature_dim: int
    hidden_dim: int
    n_classes: int
    n_cameras: int
    n_scales: int = DEFAULT_N_SCALES
    n_r1: int = DEFAULT_N_R1
    n_r2: int = DEFAULT_N_R2
    cell_size: float = 1.0

    @property
    def n_props(self) -> int:
        return 11 + self.n_classes

    def shapes(self) -> dict[str, tuple[int, ...]]:
        m, h = self.query_dim, self.hidden_dim
        n_s = self.n_cameras * self.n_scales * self.n_r1 * self.n_r2
        return {
            "conv": (27, m, m),
            "w_off3d": (self.n_r1 * 3, m), "b_off3d": (self.n_r1 * 3,),
            "w_offuvd": (self.n_r1 * self.n_r2 * 3, m), "b_offuvd": (self.n_r1 * self.n_r2 * 3,),
            "w_attn": (n_s, m), "b_attn": (n_s,),
            "value_proj": (m, self.feature_dim),
            "w1": (h, m), "b1": (h,), "w2": (self.n_props, h), "b2": (self.n_props,),
        }


FIELD_ORDER = ("conv", "w_off3d", "b_off3d", "w_offuvd", "b_offuvd", "w_attn", "b_attn",
               "value_proj", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class BlockWeights:
    dims: BlockDims
    arrays: dict = field(repr=False)

    def __post_init__(self):
        shapes = self.dims.shapes()
        for name in FIELD_ORDER:
            if name not in self.arrays:
                raise ValueError(f"missing block weight {name!r}")
            if tuple(np.shape(self.arrays[name])) != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {np.shape(self.arrays[name])}")

    @property
    def conv(self) -> SparseConvWeights:
        return SparseConvWeights(self.dims.cell_size, np.asarray(self.arrays["conv"], float))

    @property
    def head(self) -> PlanHead:
        a = self.arrays
        return PlanHead(*(np.asarray(a[k], float) for k in
                          ("w_off3d", "b_off3d", "w_offuvd", "b_offuvd", "w_attn", "b_attn")))

    @property
    def mlp(self) -> MLPWeights:
        a = self.arrays
        return MLPWeights(*(np.asarray(a[k], float) for k in ("w1", "b1", "w2", "b2")))

    @property
    def value_proj(self) -> np.ndarray:
        return np.asarray(self.arrays["value_proj"], float)


def zero_block_weights(dims: BlockDims) -> BlockWeights:
    return BlockWeights(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})


def random_block_weights(dims: BlockDims, seed: int, std: float = 0.05) -> BlockWeights:
    rng = np.random.default_rng(seed)
    return BlockWeights(dims, {k: rng.normal(0.0, std, s) for k, s in dims.shapes().items()})


def init_queries(n: int, dim: int, seed: int = 0, std: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, std, (n, dim))


def run_block(gaussians: GaussianSet, queries: np.ndarray, cameras, pyramids,
              weights: BlockWeights) -> tuple[GaussianSet, np.ndarray]:
    d = weights.dims
    queries = sparse_self_encode(gaussians, queries, weights.conv)
    plan = make_plan(queries, weights.head, d.n_cameras, d.n_scales, d.n_r1, d.n_r2)
    queries = queries + aggregate_query_updates(gaussians, plan, cameras, pyramids, weights.value_proj)
    return refine(gaussians, queries, weights.mlp), queries


def run_blocks(gaussians: GaussianSet, queries: np.ndarray, cameras, pyramids, n_blocks: int,
               block_weights: Sequence[BlockWeights]) -> tuple[GaussianSet, np.ndarray]:
    """Apply ``n_blocks`` rounds of self-encoding, attention and refinement.

    ``block_weights`` holds one entry per block, or a single entry shared by all.
    """
    if n_blocks < 1:
        raise ValueError("need at least one block")
    if len(block_weights) not in (1, n_blocks):
        raise ValueError("block_weights must have one entry or one per block")
    for b in range(n_blocks):
        w = block_weights[b if len(block_weights) > 1 else 0]
        gaussians, queries = run_block(gaussians, queries, cameras, pyramids, w)
    return gaussians, queries


def write_weights(path, blocks: Sequence[BlockWeights]) -> None:
    """GW3D file: magic, uint32 block count, dims header, then float32 arrays in FIELD_ORDER."""
    d = blocks[0].dims
    with open(path, "wb") as fh:
        fh.write(GW3D_MAGIC)
        fh.write(struct.pack("<9I", len(blocks), d.query_dim, d.feature_dim, d.hidden_dim,
                             d.n_classes, d.n_cameras, d.n_scales, d.n_r1, d.n_r2))
        fh.write(struct.pack("<d", d.cell_size))
        for block in blocks:
            if block.dims != d:
                raise ValueError("all blocks must share dimensions")
            for name in FIELD_ORDER:
                fh.write(np.asarray(block.arrays[name], dtype="<f4").tobytes())


def read_weights(path) -> list[BlockWeights]:
    data = Path(path).read_bytes()
    if data[:4] != GW3D_MAGIC:
        raise ValueError(f"{path}: not a block weights file (bad magic)")
    n_blocks, *dims = struct.unpack_from("<9I", data, 4)
    (cell_size,) = struct.unpack_from("<d", data, 40)
    bd = BlockDims(*dims, cell_size=cell_size)
    shapes = bd.shapes()
    off = 48
    blocks = []
    for _ in range(n_blocks):
        arrays = {}
        for name in FIELD_ORDER:
            count = int(np.prod(shapes[name]))
            if off + 4 * count > len(data):
                raise ValueError(f"{path}: truncated weights file")
            arrays[name] = np.frombuffer(data, "<f4", count, off).astype(float).reshape(shapes[name])
            off += 4 * count
        blocks.append(BlockWeights(bd, arrays))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return blocks
