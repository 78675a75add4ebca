"""Synthetic worlds: ground truth occupancy, simulated LiDAR and class-coded feature pyramids.

Scenes are built from boxes (with yaw), spheres and a ground half-space. Rays
are sphere-traced against the analytic signed distance of the union.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (DEFAULT_BINS, DEFAULT_D_MAX, DEFAULT_N_SCALES, DepthDistributionMap,
                        FeatureMap, build_depth_distribution)
from .config import ConfigError, KeyValueConfig, field_floats, parse_fields
from .gaussians import ClassSet
from .grid import GridSpec
from .lidar import (CameraModel, LidarSweepSet, Sweep, look_at, make_pose, project_depth,
                    yaw_rotation)
from .splatting import OccupancyGrid

MARCH_TOL = 1e-3
_CONVERGE = 1e-5
_MAX_STEPS = 4000
CODEBOOK_SEED = 20240917

SHAPES = ("box", "sphere", "plane")


@dataclass(frozen=True)
class Primitive:
    """``box``: full edge lengths in ``size`` and a yaw; ``sphere``: radius ``size[0]``;
    ``plane``: solid half-space ``z <= center[2]``."""

    shape: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_index: int
    yaw: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive shape {self.shape!r}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        if self.shape == "plane":
            return p[:, 2] - c[2]
        if self.shape == "sphere":
            return np.linalg.norm(p - c, axis=1) - self.size[0]
        local = (p - c) @ yaw_rotation(self.yaw)  # rows rotated by -yaw
        q = np.abs(local) - 0.5 * np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def contains(self, p: np.ndarray) -> np.ndarray:
        return self.sdf(p) <= 0.0

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        c = np.asarray(self.center)
        if self.shape == "plane":
            return None
        if self.shape == "sphere":
            r = self.size[0]
            return c - r, c + r
        half = 0.5 * np.asarray(self.size)
        rot = np.abs(yaw_rotation(self.yaw))
        ext = rot @ half
        return c - ext, c + ext


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 32
    azimuth_res_deg: float = 1.0
    elevation_deg: tuple[float, float] = (-30.0, 10.0)
    max_range: float = 60.0
    noise: float = 0.02
    class_intensity: tuple[float, ...] | None = None  # default: linear ramp over classes


@dataclass(frozen=True)
class SweepPose:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0
    timestamp: float = 0.0

    def matrix(self) -> np.ndarray:
        return make_pose(yaw_rotation(np.deg2rad(self.yaw_deg)), self.position)


@dataclass(frozen=True)
class SceneSpec:
    classes: ClassSet
    grid: GridSpec = field(default_factory=lambda: GridSpec.from_extent(
        (-25, -25, -2.5), (25, 25, 1.5), 0.5))
    primitives: tuple[Primitive, ...] = ()
    cameras: tuple[CameraModel, ...] = ()
    lidar: LidarConfig = LidarConfig()
    sweeps: tuple[SweepPose, ...] = (SweepPose(),)
    feature_dim: int = 8
    n_scales: int = DEFAULT_N_SCALES
    depth_bins: int = DEFAULT_BINS
    d_max: float = DEFAULT_D_MAX
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.grid.lower, self.grid.upper
        for prim in self.primitives:
            if not 0 <= prim.class_index < len(self.classes) or prim.class_index == self.classes.empty_index:
                raise ValueError(f"primitive class {prim.class_index} is not a non-empty class")
            b = prim.bounds()
            if b is None:
                if not lo[2] <= prim.center[2] <= hi[2]:
                    raise ValueError("ground plane height outside the extent")
            elif np.any(b[0] < lo - 1e-9) or np.any(b[1] > hi + 1e-9):
                raise ValueError(f"{prim.shape} primitive leaves the scene extent")
        if self.feature_dim < len(self.classes):
            raise ValueError("feature_dim must be at least the class count for an orthonormal codebook")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def intensity_table(self) -> np.ndarray:
        if self.lidar.class_intensity is not None:
            return np.asarray(self.lidar.class_intensity, dtype=float)
        return np.linspace(0.2, 1.0, self.n_classes)


def scene_sdf(primitives: Sequence[Primitive], p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union distance and the index of the nearest primitive (ties: earliest)."""
    if not primitives:
        return np.full(len(p), np.inf), np.full(len(p), -1)
    d = np.stack([prim.sdf(p) for prim in primitives], axis=1)
    idx = np.argmin(d, axis=1)
    return d[np.arange(len(p)), idx], idx


def cast_rays(origins: np.ndarray, dirs: np.ndarray, primitives: Sequence[Primitive],
              max_range: float, nudge: float = 0.5 * MARCH_TOL):
    """Sphere-trace rays; returns hit points, ray distance and primitive id (-1 on miss).

    Converged hits are pushed ``nudge`` metres inside the surface along the
    primitive's outward normal so they fall within its solid.
    """
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape).copy()
    n = len(dirs)
    t = np.zeros(n)
    prim = np.full(n, -1)
    active = np.ones(n, dtype=bool)
    if primitives:
        for _ in range(_MAX_STEPS):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            p = origins[idx] + t[idx, None] * dirs[idx]
            dist, which = scene_sdf(primitives, p)
            done = dist < _CONVERGE
            prim[idx[done]] = which[done]
            t[idx[~done]] += dist[~done]
            gone = t[idx] > max_range
            active[idx[done | gone]] = False
    hit = prim >= 0
    points = origins + t[:, None] * dirs
    for k, primitive in enumerate(primitives):
        sel = prim == k
        if not np.any(sel):
            continue
        p = points[sel]
        normal = _normal(primitive, p)
        points[sel] = p - normal * (primitive.sdf(p)[:, None] + nudge)
    points[~hit] = np.nan
    t[~hit] = np.inf
    return points, t, prim


def _normal(prim: Primitive, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grads = np.stack([(prim.sdf(p + h * e) - prim.sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    return grads / np.maximum(np.linalg.norm(grads, axis=1, keepdims=True), 1e-12)


def rasterize_gt(spec: SceneSpec) -> OccupancyGrid:
    """Label each voxel by the last-listed primitive containing its center."""
    centers = spec.grid.centers()
    labels = np.full(len(centers), spec.classes.empty_index, dtype=np.int64)
    for prim in spec.primitives:
        labels[prim.contains(centers)] = prim.class_index
    return OccupancyGrid(spec.grid, labels.reshape(spec.grid.counts), spec.n_classes)


def lidar_directions(cfg: LidarConfig) -> np.ndarray:
    elev = np.deg2rad(np.linspace(cfg.elevation_deg[0], cfg.elevation_deg[1], cfg.beams))
    az = np.deg2rad(np.arange(0.0, 360.0, cfg.azimuth_res_deg))
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)


def simulate_lidar(spec: SceneSpec, return_ids: bool = False):
    """First-hit LiDAR returns per sweep pose, expressed in each sensor's frame.

    Intensity is the class constant plus seeded Gaussian noise, clipped at zero.
    With ``return_ids`` a list of per-sweep primitive ids is returned as well.
    """
    rng = np.random.default_rng(spec.rng_seed)
    dirs_s = lidar_directions(spec.lidar)
    table = spec.intensity_table()
    sweeps, ids = [], []
    for sp in spec.sweeps:
        pose = sp.matrix()
        dirs = dirs_s @ pose[:3, :3].T
        pts, _, prim = cast_rays(pose[:3, 3], dirs, spec.primitives, spec.lidar.max_range)
        hit = prim >= 0
        pts, prim = pts[hit], prim[hit]
        local = (pts - pose[:3, 3]) @ pose[:3, :3]
        cls = np.array([spec.primitives[k].class_index for k in prim], dtype=np.int64)
        eta = np.clip(table[cls] + spec.lidar.noise * rng.normal(size=len(cls)), 0.0, None)
        sweeps.append(Sweep(np.concatenate([local, eta[:, None]], axis=1), pose, sp.timestamp))
        ids.append(prim)
    out = LidarSweepSet(tuple(sweeps))
    return (out, ids) if return_ids else out


def class_codebook(n_classes: int, dim: int, seed: int = CODEBOOK_SEED) -> np.ndarray:
    """Fixed ``(n_classes, dim)`` matrix with orthonormal rows."""
    if dim < n_classes:
        raise ValueError("codebook dimension must be at least the class count")
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, n_classes)))
    return q.T.copy()


def render_camera(spec: SceneSpec, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Primitive id (``-1`` for sky) and camera-frame depth per pixel at full resolution."""
    origin, dirs = cam.pixel_rays()
    pts, _, prim = cast_rays(origin, dirs, spec.primitives, spec.d_max * 2)
    depth = np.full(len(prim), np.nan)
    hit = prim >= 0
    depth[hit] = cam.to_camera(pts[hit])[:, 2]
    return prim.reshape(cam.height, cam.width), depth.reshape(cam.height, cam.width)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def render_feature_pyramid(spec: SceneSpec, cam: CameraModel) -> list[FeatureMap]:
    prim, _ = render_camera(spec, cam)
    book = class_codebook(spec.n_classes, spec.feature_dim)
    cls = np.full(prim.shape, -1)
    for k, p in enumerate(spec.primitives):
        cls[prim == k] = p.class_index
    feats = np.where((cls >= 0)[..., None], book[np.maximum(cls, 0)], 0.0)
    levels = [FeatureMap(feats, 0)]
    for s in range(1, spec.n_scales):
        levels.append(FeatureMap(avg_pool2(levels[-1].features), s))
    return levels


def depth_pyramid(spec: SceneSpec, cloud: np.ndarray, cam: CameraModel) -> list[DepthDistributionMap]:
    return [build_depth_distribution(project_depth(cloud, cam, s, spec.d_max), spec.depth_bins, spec.d_max)
            for s in range(spec.n_scales)]


# ---------------------------------------------------------------------------
# config files

_SCENE_KEYS = {
    "extent", "resolution", "classes", "empty_class", "seed", "primitive", "camera", "sweep",
    "lidar.beams", "lidar.azimuth_res", "lidar.elevation", "lidar.max_range", "lidar.noise",
    "lidar.intensity", "pyramid.scales", "pyramid.feature_dim", "pyramid.bins", "pyramid.d_max",
}

_DEFAULT_CAMERA = dict(width=64, height=48, fx=32.0, fy=32.0, position=(0.0, 0.0, 0.0),
                       target=(10.0, 0.0, -1.0))


def load_scene_spec(path) -> SceneSpec:
    return scene_spec_from_config(KeyValueConfig.load(path))


def scene_spec_from_config(cfg: KeyValueConfig) -> SceneSpec:
    cfg.check_known(_SCENE_KEYS)
    path = cfg.path
    names = cfg.words("classes", required=True)
    empty = cfg.str("empty_class", names[0])
    if empty not in names:
        raise ConfigError("empty class is not listed in classes", key="empty_class", path=path)
    classes = ClassSet(tuple(names), names.index(empty))
    ext = cfg.floats("extent", [-25, 25, -25, 25, -2.5, 1.5], n=6)
    res = cfg.float("resolution", 0.5)
    try:
        grid = GridSpec.from_extent(ext[0::2], ext[1::2], res)
    except ValueError as exc:
        raise ConfigError(str(exc), key="extent", path=path) from None

    prims = []
    for e in cfg.all("primitive"):
        words, fields = parse_fields(e)
        if len(words) != 1 or words[0] not in SHAPES:
            raise ConfigError(f"primitive shape must be one of {SHAPES}", key="primitive", line=e.line, path=path)
        cls_name = fields.get("class")
        if cls_name not in names:
            raise ConfigError(f"unknown class {cls_name!r}", key="primitive", line=e.line, path=path)
        shape = words[0]
        if shape == "plane":
            (h,) = field_floats(e, fields, "height", 1, path=path)
            center, size = (0.0, 0.0, h), (0.0, 0.0, 0.0)
        elif shape == "sphere":
            center = field_floats(e, fields, "center", 3, path=path)
            (r,) = field_floats(e, fields, "radius", 1, path=path)
            size = (r, r, r)
        else:
            center = field_floats(e, fields, "center", 3, path=path)
            size = field_floats(e, fields, "size", 3, path=path)
        (yaw,) = field_floats(e, fields, "yaw", 1, default=[0.0], path=path)
        prims.append(Primitive(shape, tuple(center), tuple(size), names.index(cls_name), np.deg2rad(yaw)))

    cams = []
    for i, e in enumerate(cfg.all("camera")):
        _, fields = parse_fields(e)
        d = dict(_DEFAULT_CAMERA)
        w = int(field_floats(e, fields, "width", 1, [d["width"]], path)[0])
        h = int(field_floats(e, fields, "height", 1, [d["height"]], path)[0])
        fx = field_floats(e, fields, "fx", 1, [d["fx"]], path)[0]
        fy = field_floats(e, fields, "fy", 1, [fx], path)[0]
        cx = field_floats(e, fields, "cx", 1, [w / 2], path)[0]
        cy = field_floats(e, fields, "cy", 1, [h / 2], path)[0]
        pos = field_floats(e, fields, "position", 3, list(d["position"]), path)
        tgt = field_floats(e, fields, "target", 3, list(d["target"]), path)
        cams.append(CameraModel(fx, fy, cx, cy, w, h, look_at(pos, tgt), fields.get("name", f"cam{i}")))
    if not cams:
        d = _DEFAULT_CAMERA
        cams.append(CameraModel(d["fx"], d["fy"], d["width"] / 2, d["height"] / 2, d["width"], d["height"],
                                look_at(d["position"], d["target"]), "cam0"))

    sweeps = []
    for e in cfg.all("sweep"):
        _, fields = parse_fields(e)
        pos = field_floats(e, fields, "position", 3, [0.0, 0.0, 0.0], path)
        yaw = field_floats(e, fields, "yaw", 1, [0.0], path)[0]
        t = field_floats(e, fields, "time", 1, [float(len(sweeps))], path)[0]
        sweeps.append(SweepPose(tuple(pos), yaw, t))
    if not sweeps:
        sweeps.append(SweepPose())

    elev = cfg.floats("lidar.elevation", [-30.0, 10.0], n=2)
    intensity = cfg.floats("lidar.intensity", None)
    if intensity is not None and len(intensity) != len(names):
        raise ConfigError("need one intensity per class", key="lidar.intensity", path=path)
    lidar = LidarConfig(cfg.int("lidar.beams", 32), cfg.float("lidar.azimuth_res", 1.0), tuple(elev),
                        cfg.float("lidar.max_range", 60.0), cfg.float("lidar.noise", 0.02),
                        None if intensity is None else tuple(intensity))
    try:
        return SceneSpec(classes, grid, tuple(prims), tuple(cams), lidar, tuple(sweeps),
                         cfg.int("pyramid.feature_dim", max(8, len(names))),
                         cfg.int("pyramid.scales", DEFAULT_N_SCALES),
                         cfg.int("pyramid.bins", DEFAULT_BINS),
                         cfg.float("pyramid.d_max", DEFAULT_D_MAX),
                         cfg.int("seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc), path=path) from None
