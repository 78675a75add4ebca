"""End-to-end commands: scene synthesis, fitting, forward refinement, evaluation, export.

Every command is deterministic given its configuration (seeds included) and
writes its artifacts into an output directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from . import attention, gaussians as gs, lidar, losses, scenes, splatting
from .config import ConfigError, KeyValueConfig
from .gaussians import GaussianSet
from .grid import GridSpec
from .initialization import InitConfig, init_gaussians
from .splatting import OccupancyGrid

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# scene directories

@dataclass
class Scene:
    spec: scenes.SceneSpec
    gt: OccupancyGrid
    sweeps: lidar.LidarSweepSet
    cameras: list
    pyramids: list  # per camera: list of (FeatureMap, DepthDistributionMap)


def _save_pose(pose: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(pose).ravel())


def _load_pose(tokens: Sequence[str]) -> np.ndarray:
    return np.array([float(t) for t in tokens]).reshape(4, 4)


def write_scene(spec: scenes.SceneSpec, out_dir, config_text: str | None = None) -> Scene:
    out = Path(out_dir)
    (out / "sweeps").mkdir(parents=True, exist_ok=True)
    (out / "pyramids").mkdir(exist_ok=True)
    if config_text is not None:
        (out / "scene.cfg").write_text(config_text)
    gt = scenes.rasterize_gt(spec)
    splatting.write_grid(out / "gt.ogr", gt)
    sweeps = scenes.simulate_lidar(spec)
    with open(out / "sweeps.txt", "w") as fh:
        for i, sw in enumerate(sweeps.sweeps):
            name = f"sweep_{i:03d}.lpc"
            lidar.write_lpc(out / "sweeps" / name, sw.points)
            fh.write(f"{name} {sw.timestamp!r} {_save_pose(sw.pose)}\n")
    cloud = lidar.aggregate_sweeps(sweeps)
    pyramids = []
    with open(out / "cameras.txt", "w") as fh:
        for cam in spec.cameras:
            fh.write(f"{cam.name} {cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r} {cam.width} {cam.height} "
                     f"{_save_pose(cam.extrinsics)}\n")
            feats = scenes.render_feature_pyramid(spec, cam)
            levels = []
            for s, fmap in enumerate(feats):
                sparse = lidar.project_depth(cloud, cam, s, spec.d_max)
                np.save(out / "pyramids" / f"{cam.name}_s{s}.npy", fmap.features.astype("<f4"))
                lidar.write_depth_map(out / "pyramids" / f"{cam.name}_s{s}.sdm", sparse)
                # keep the in-memory scene identical to what load_scene reads back
                fmap = attention.FeatureMap(fmap.features.astype(np.float32).astype(float), s)
                sparse = lidar.SparseDepthMap(sparse.depth.astype(np.float32).astype(float), s)
                levels.append((fmap, attention.build_depth_distribution(sparse, spec.depth_bins, spec.d_max)))
            pyramids.append(levels)
    return Scene(spec, gt, sweeps, list(spec.cameras), pyramids)


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    for name in ("scene.cfg", "gt.ogr", "sweeps.txt", "cameras.txt"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name}: missing scene artifact")
    spec = scenes.load_scene_spec(d / "scene.cfg")
    gt = splatting.read_grid(d / "gt.ogr")
    sweeps = []
    for line in (d / "sweeps.txt").read_text().splitlines():
        tok = line.split()
        sweeps.append(lidar.Sweep(lidar.read_lpc(d / "sweeps" / tok[0]), _load_pose(tok[2:18]), float(tok[1])))
    cameras, pyramids = [], []
    for line in (d / "cameras.txt").read_text().splitlines():
        tok = line.split()
        cam = lidar.CameraModel(float(tok[1]), float(tok[2]), float(tok[3]), float(tok[4]),
                                int(tok[5]), int(tok[6]), _load_pose(tok[7:23]), tok[0])
        levels = []
        for s in range(spec.n_scales):
            feats = np.load(d / "pyramids" / f"{cam.name}_s{s}.npy").astype(float)
            sparse = lidar.read_depth_map(d / "pyramids" / f"{cam.name}_s{s}.sdm")
            levels.append((attention.FeatureMap(feats, s),
                           attention.build_depth_distribution(sparse, spec.depth_bins, spec.d_max)))
        cameras.append(cam)
        pyramids.append(levels)
    return Scene(spec, gt, lidar.LidarSweepSet(tuple(sweeps)), cameras, pyramids)


def cmd_synth(config_path, out_dir, seed: int | None = None) -> Scene:
    text = Path(config_path).read_text()
    if seed is not None:
        lines = [ln for ln in text.splitlines() if ln.split("#")[0].split("=")[0].strip() != "seed"]
        text = "\n".join(lines + [f"seed = {seed}"]) + "\n"
    spec = scenes.scene_spec_from_config(KeyValueConfig.parse(text, str(config_path)))
    return write_scene(spec, out_dir, text)


# ---------------------------------------------------------------------------
# initialization shared by fit and forward

@dataclass(frozen=True)
class InitSettings:
    n_gaussians: int = 512
    voxel_size: tuple[float, float, float] = lidar.DEFAULT_VOXEL_SIZE
    init_scale: tuple[float, float, float] | None = None  # default: voxel size
    n_sweeps: int = lidar.DEFAULT_N_SWEEPS
    default_opacity: float = 0.5
    seed: int = 0


def initial_gaussians(scene: Scene, init: InitSettings) -> GaussianSet:
    """Aggregate the latest sweeps, normalize intensity, voxelize and seed Gaussians."""
    cloud = lidar.aggregate_sweeps(scene.sweeps.latest(init.n_sweeps))
    cloud = lidar.normalize_intensity(cloud)
    target = scene.gt.grid
    vgrid = GridSpec.from_extent(target.lower, target.upper, init.voxel_size) \
        if _divides(target, init.voxel_size) else GridSpec(
            tuple(target.lower), tuple(init.voxel_size),
            tuple(np.ceil((target.upper - target.lower) / np.asarray(init.voxel_size)).astype(int)))
    voxels = lidar.voxelize(cloud, vgrid)
    cfg = InitConfig(n_gaussians=init.n_gaussians, n_classes=scene.spec.n_classes,
                     default_scale=tuple(init.init_scale or init.voxel_size),
                     default_opacity=init.default_opacity, rng_seed=init.seed)
    return init_gaussians(voxels, cfg, target)


def _divides(grid: GridSpec, size) -> bool:
    span = grid.upper - grid.lower
    n = span / np.asarray(size, dtype=float)
    return bool(np.all(np.abs(n - np.rint(n)) < 1e-9))


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class FitConfig:
    iterations: int = 500
    lr_mean: float = 1e-2
    lr_scale: float = 1e-2
    lr_rotation: float = 1e-3
    lr_opacity: float = 1e-2
    lr_logits: float = 5e-2
    lam: float = 1.0
    kappa: float = splatting.DEFAULT_KAPPA
    b_empty: float = splatting.DEFAULT_B_EMPTY
    eval_every: int = 50
    init: InitSettings = InitSettings()

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("lr_mean", "lr_scale", "lr_rotation", "lr_opacity", "lr_logits"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")


_FIT_KEYS = {"scene", "iterations", "lr.mean", "lr.scale", "lr.rotation", "lr.opacity", "lr.logits",
             "lambda", "kappa", "b_empty", "eval_every", "n_gaussians", "voxel_size", "init_scale",
             "n_sweeps", "default_opacity", "seed"}


def init_settings_from_config(cfg: KeyValueConfig) -> InitSettings:
    d = InitSettings()
    init_scale = cfg.floats("init_scale", None, n=3)
    return InitSettings(
        n_gaussians=cfg.int("n_gaussians", d.n_gaussians),
        voxel_size=tuple(cfg.floats("voxel_size", list(d.voxel_size), n=3)),
        init_scale=None if init_scale is None else tuple(init_scale),
        n_sweeps=cfg.int("n_sweeps", d.n_sweeps),
        default_opacity=cfg.float("default_opacity", d.default_opacity),
        seed=cfg.int("seed", d.seed),
    )


def fit_config_from_file(path, seed: int | None = None) -> tuple[FitConfig, str | None]:
    cfg = KeyValueConfig.load(path)
    cfg.check_known(_FIT_KEYS)
    d = FitConfig()
    init = init_settings_from_config(cfg)
    if seed is not None:
        init = InitSettings(**{**init.__dict__, "seed": seed})
    try:
        fc = FitConfig(
            iterations=cfg.int("iterations", d.iterations),
            lr_mean=cfg.float("lr.mean", d.lr_mean), lr_scale=cfg.float("lr.scale", d.lr_scale),
            lr_rotation=cfg.float("lr.rotation", d.lr_rotation),
            lr_opacity=cfg.float("lr.opacity", d.lr_opacity), lr_logits=cfg.float("lr.logits", d.lr_logits),
            lam=cfg.float("lambda", d.lam), kappa=cfg.float("kappa", d.kappa),
            b_empty=cfg.float("b_empty", d.b_empty), eval_every=cfg.int("eval_every", d.eval_every),
            init=init)
    except ValueError as exc:
        raise ConfigError(str(exc), path=cfg.path) from None
    scene = cfg.str("scene")
    if scene is not None and not Path(scene).is_absolute():
        scene = str(Path(path).parent / scene)
    return fc, scene


@dataclass
class FitResult:
    gaussians: GaussianSet
    prediction: OccupancyGrid
    metrics: losses.IoUResult
    trace: list = field(default_factory=list)  # (iteration, ce, lov, total, iou, miou)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[3] for row in self.trace])


class _Params:
    """Unconstrained parameters optimized by plain gradient descent."""

    def __init__(self, g: GaussianSet):
        self.means = g.means.copy()
        self.log_scales = np.log(g.scales)
        self.quats = g.rotations.copy()
        with np.errstate(divide="ignore"):
            self.opacity_logits = logit(np.clip(g.opacities, 1e-6, 1 - 1e-6))
        self.logits = g.logits.copy()
        self.s_min = g.s_min

    def gaussians(self) -> GaussianSet:
        return GaussianSet(self.means, self.quats, np.exp(self.log_scales),
                           expit(self.opacity_logits), self.logits, self.s_min)

    def step(self, g: GaussianSet, grads: splatting.GaussianGradients, cfg: FitConfig) -> None:
        scales = np.exp(self.log_scales)
        g_log_s = np.where(scales > self.s_min, grads.scales * scales, 0.0)
        g_ol = grads.opacities * g.opacities * (1.0 - g.opacities)
        self.means -= cfg.lr_mean * grads.means
        self.log_scales -= cfg.lr_scale * g_log_s
        self.quats -= cfg.lr_rotation * grads.rotations
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)
        self.opacity_logits -= cfg.lr_opacity * g_ol
        self.logits -= cfg.lr_logits * grads.logits

    def finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.means, self.log_scales, self.quats, self.opacity_logits, self.logits))


def fit(scene: Scene, cfg: FitConfig, gaussians: GaussianSet | None = None) -> FitResult:
    """Gradient descent of Gaussian properties against the scene's ground truth."""
    gt = scene.gt
    grid = gt.grid
    empty = scene.spec.classes.empty_index
    g = initial_gaussians(scene, cfg.init) if gaussians is None else gaussians
    params = _Params(g)
    trace = []
    for it in range(cfg.iterations + 1):
        g = params.gaussians()
        index = splatting.index_for_grid(g, grid, cfg.kappa)
        pred = splatting.splat(g, grid, index, kappa=cfg.kappa, b_empty=cfg.b_empty, empty_index=empty)
        ce, lov, total, grad = losses.total_loss(pred, gt, cfg.lam)
        if not np.isfinite(total):
            raise NumericalAbort(it)
        iou = miou = float("nan")
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            res = losses.evaluate(pred, gt, empty)
            iou, miou = res.iou, res.miou
            log.info("iter %d loss %.6f (ce %.6f lov %.6f) IoU %.4f mIoU %.4f", it, total, ce, lov, iou, miou)
        trace.append((it, ce, lov, total, iou, miou))
        if it == cfg.iterations:
            break
        grads = splatting.splat_backward(g, grid, grad, index, kappa=cfg.kappa)
        with np.errstate(over="ignore", invalid="ignore"):
            params.step(g, grads, cfg)
        if not params.finite() or np.any(params.log_scales > 700):
            raise NumericalAbort(it + 1, "parameters")
    metrics = losses.evaluate(pred, gt, empty)
    return FitResult(g, pred, metrics, trace)


def cmd_fit(scene_dir, fit_cfg: FitConfig, out_dir, dump_trace: bool = True) -> FitResult:
    scene = load_scene(scene_dir)
    result = fit(scene, fit_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gs.write_goc(out / "gaussians.goc", result.gaussians)
    splatting.write_grid(out / "pred.ogr", result.prediction)
    losses.write_metrics_csv(out / "metrics.csv", result.metrics, scene.spec.classes.names,
                             scene.spec.classes.empty_index)
    if dump_trace:
        with losses.TraceWriter(out / "trace.csv") as tw:
            for row in result.trace:
                tw.log(*row)
    return result


# ---------------------------------------------------------------------------
# forward refinement

_FORWARD_KEYS = {"scene", "weights", "blocks", "n_gaussians", "voxel_size", "init_scale", "n_sweeps",
                 "default_opacity", "seed", "kappa", "b_empty"}


@dataclass
class ForwardResult:
    initial: GaussianSet
    gaussians: GaussianSet
    queries: np.ndarray
    prediction: OccupancyGrid


def check_weights(scene: Scene, blocks: Sequence[attention.BlockWeights]) -> None:
    d = blocks[0].dims
    problems = []
    if d.n_classes != scene.spec.n_classes:
        problems.append(f"weights expect {d.n_classes} classes, scene has {scene.spec.n_classes}")
    if d.n_cameras != len(scene.cameras):
        problems.append(f"weights expect {d.n_cameras} cameras, scene has {len(scene.cameras)}")
    if d.n_scales > scene.spec.n_scales:
        problems.append(f"weights expect {d.n_scales} scales, scene has {scene.spec.n_scales}")
    if d.feature_dim != scene.spec.feature_dim:
        problems.append(f"weights expect feature dim {d.feature_dim}, scene has {scene.spec.feature_dim}")
    if problems:
        raise ConfigError("weight-shape mismatch: " + "; ".join(problems), key="weights")


def forward(scene: Scene, blocks: Sequence[attention.BlockWeights], n_blocks: int,
            init: InitSettings, kappa: float = splatting.DEFAULT_KAPPA,
            b_empty: float = splatting.DEFAULT_B_EMPTY) -> ForwardResult:
    check_weights(scene, blocks)
    g0 = initial_gaussians(scene, init)
    q0 = attention.init_queries(len(g0), blocks[0].dims.query_dim, init.seed)
    g, q = attention.run_blocks(g0, q0, scene.cameras, scene.pyramids, n_blocks, blocks)
    pred = splatting.splat(g, scene.gt.grid, kappa=kappa, b_empty=b_empty,
                           empty_index=scene.spec.classes.empty_index)
    return ForwardResult(g0, g, q, pred)


def cmd_forward(config_path, out_dir, seed: int | None = None, n_blocks: int | None = None) -> ForwardResult:
    cfg = KeyValueConfig.load(config_path)
    cfg.check_known(_FORWARD_KEYS)
    base = Path(config_path).parent
    scene_dir = base / cfg.str("scene", required=True)
    weights_path = base / cfg.str("weights", required=True)
    init = init_settings_from_config(cfg)
    if seed is not None:
        init = InitSettings(**{**init.__dict__, "seed": seed})
    n_blocks = n_blocks or cfg.int("blocks", 1)
    scene = load_scene(scene_dir)
    blocks = attention.read_weights(weights_path)
    res = forward(scene, blocks, n_blocks, init, cfg.float("kappa", splatting.DEFAULT_KAPPA),
                  cfg.float("b_empty", splatting.DEFAULT_B_EMPTY))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gs.write_goc(out / "gaussians.goc", res.gaussians)
    splatting.write_grid(out / "pred.ogr", res.prediction)
    return res


# ---------------------------------------------------------------------------
# evaluation, multi-resolution splatting, export

def cmd_eval(pred_path, gt_path, out_csv, class_names: Sequence[str] | None = None,
             empty_index: int = 0) -> losses.IoUResult:
    pred = splatting.read_grid(pred_path)
    gt = splatting.read_grid(gt_path)
    if pred.grid != gt.grid or pred.n_classes != gt.n_classes:
        raise ConfigError("prediction and ground truth grid specs differ")
    result = losses.evaluate(pred, gt, empty_index)
    names = class_names or [f"class{c}" for c in range(gt.n_classes)]
    losses.write_metrics_csv(out_csv, result, names, empty_index)
    return result


def splat_multires(gaussians: GaussianSet, grids: Sequence[GridSpec], kappa: float = splatting.DEFAULT_KAPPA,
                   b_empty: float = splatting.DEFAULT_B_EMPTY, empty_index: int = 0) -> list[OccupancyGrid]:
    """Re-splat the same Gaussians onto each grid; all grids must share one extent."""
    for other in grids[1:]:
        if not grids[0].same_extent(other):
            raise ValueError("multi-resolution grids must share their extent")
    return [splatting.splat(gaussians, grid, kappa=kappa, b_empty=b_empty, empty_index=empty_index)
            for grid in grids]


def majority_children(fine_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Most frequent label among the 2x2x2 children of each coarse voxel (ties: lowest label)."""
    x, y, z = (s // 2 for s in fine_labels.shape)
    kids = fine_labels.reshape(x, 2, y, 2, z, 2).transpose(0, 2, 4, 1, 3, 5).reshape(x, y, z, 8)
    counts = np.stack([(kids == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    return np.argmax(counts, axis=-1)


def multires_agreement(coarse: OccupancyGrid, fine: OccupancyGrid, margin: float = 0.1) -> tuple[float, int]:
    """Fraction of confident coarse voxels whose argmax equals the majority of their children."""
    vals = np.sort(coarse.values, axis=-1)
    confident = (vals[..., -1] - vals[..., -2]) > margin
    major = majority_children(fine.labels(), fine.n_classes)
    agree = (coarse.labels() == major)[confident]
    n = int(confident.sum())
    return (float(agree.mean()) if n else float("nan")), n


_MULTIRES_KEYS = {"gaussians", "extent", "resolutions", "kappa", "b_empty", "empty_index"}


def cmd_splat_multires(config_path, out_dir) -> list[OccupancyGrid]:
    cfg = KeyValueConfig.load(config_path)
    cfg.check_known(_MULTIRES_KEYS)
    base = Path(config_path).parent
    g = gs.read_goc(base / cfg.str("gaussians", required=True))
    ext = cfg.floats("extent", required=True, n=6)
    grids = []
    for res in cfg.floats("resolutions", required=True):
        try:
            grids.append(GridSpec.from_extent(ext[0::2], ext[1::2], res))
        except ValueError as exc:
            raise ConfigError(str(exc), key="resolutions", path=cfg.path) from None
    outs = splat_multires(g, grids, cfg.float("kappa", splatting.DEFAULT_KAPPA),
                          cfg.float("b_empty", splatting.DEFAULT_B_EMPTY), cfg.int("empty_index", 0))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for grid, occ in zip(grids, outs):
        splatting.write_grid(out / f"pred_{grid.voxel_size[0]:g}m.ogr", occ)
    return outs


def cmd_export_ply(input_path, out_path, empty_index: int = 0) -> int:
    """Export a Gaussian dump or an occupancy grid as an ASCII PLY; returns the vertex count."""
    magic = Path(input_path).read_bytes()[:4]
    if magic == gs.GOC_MAGIC:
        g = gs.read_goc(input_path)
        gs.export_gaussians_ply(out_path, g)
        return len(g)
    if magic == splatting.OGR_MAGIC:
        occ = splatting.read_grid(input_path)
        labels = occ.labels().ravel()
        keep = labels != empty_index
        gs.write_ply(out_path, occ.grid.centers()[keep], labels[keep])
        return int(keep.sum())
    raise ConfigError(f"{input_path}: unrecognised file type")
