"""Semantic 3D Gaussians: parameters, covariance and pointwise evaluation.

A scene is a mixture of anisotropic Gaussians. Each one carries a mean, a unit
quaternion ``(w, x, y, z)``, per-axis scales, an opacity in ``[0, 1]`` and an
unnormalized vector of class logits. Evaluated at ``x`` a Gaussian yields

    opacity * exp(-0.5 * (x - m)^T Sigma^-1 (x - m)) * logits,   Sigma = R S S^T R^T

Both a single-Gaussian type (:class:`SemanticGaussian`) and a struct-of-arrays
container (:class:`GaussianSet`) are provided; kernels operate on the latter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

S_MIN = 1e-4
GOC_MAGIC = b"GOC1"

# RGB palette for PLY export, indexed by class id (cycled).
PALETTE = np.array([
    [0, 0, 0], [255, 120, 50], [0, 150, 245], [0, 175, 0], [255, 0, 0],
    [255, 255, 0], [0, 255, 255], [200, 180, 0], [255, 192, 203], [150, 240, 80],
    [135, 60, 0], [75, 0, 75], [230, 230, 250], [160, 32, 240], [255, 158, 0],
], dtype=np.uint8)


def _quat_norm(r: np.ndarray) -> np.ndarray:
    # written out so single quaternions and stacks round identically
    w, x, y, z = np.moveaxis(r, -1, 0)
    return np.sqrt(w * w + x * x + y * y + z * z)[..., None]


def _normalize_quat(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    norm = _quat_norm(r)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("quaternion must have finite non-zero norm")
    return r / norm


def _unit_quat(r) -> np.ndarray:
    """Normalize, leaving rows already unit to within 1e-15 untouched (idempotent re-wrapping)."""
    r = np.asarray(r, dtype=float)
    return np.where(np.abs(_quat_norm(r) - 1.0) <= 1e-15, r, _normalize_quat(r))


def quat_to_rot(r) -> np.ndarray:
    """Rotation matrix of quaternion ``r = (w, x, y, z)``; ``r`` need not be unit.

    Accepts a single quaternion or a stack ``(..., 4)`` and returns ``(..., 3, 3)``.
    """
    w, x, y, z = np.moveaxis(_normalize_quat(r), -1, 0)
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return rot.reshape(rot.shape[:-1] + (3, 3))


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation by ``b`` then ``a``)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


@dataclass(frozen=True)
class Covariance:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


def covariance(r, s, s_min: float = S_MIN) -> Covariance:
    rot = quat_to_rot(r)
    s = np.maximum(np.asarray(s, dtype=float), s_min)
    return Covariance(rot @ np.diag(s * s) @ rot.T)


def mahalanobis_sq(diff: np.ndarray, rot: np.ndarray, inv_s2: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance via the factored form ``R diag(1/s^2) R^T``.

    ``diff``, ``rot`` and ``inv_s2`` broadcast over leading axes. The arithmetic is
    spelled out elementwise so that every caller (scalar or batched) rounds
    identically, which the splatting kernels rely on for bit-exact agreement.
    """
    d0, d1, d2 = diff[..., 0], diff[..., 1], diff[..., 2]
    y0 = d0 * rot[..., 0, 0] + d1 * rot[..., 1, 0] + d2 * rot[..., 2, 0]
    y1 = d0 * rot[..., 0, 1] + d1 * rot[..., 1, 1] + d2 * rot[..., 2, 1]
    y2 = d0 * rot[..., 0, 2] + d1 * rot[..., 1, 2] + d2 * rot[..., 2, 2]
    return (y0 * y0) * inv_s2[..., 0] + (y1 * y1) * inv_s2[..., 1] + (y2 * y2) * inv_s2[..., 2]


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...]
    empty_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if not 0 <= self.empty_index < len(self.names):
            raise ValueError("empty_index out of range")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def non_empty(self) -> list[int]:
        return [i for i in range(len(self.names)) if i != self.empty_index]


@dataclass(frozen=True)
class SemanticGaussian:
    """One Gaussian with constrained properties (see module docstring)."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    logits: np.ndarray
    s_min: float = S_MIN

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(3)
        rot = _unit_quat(np.array(self.rotation, dtype=float).reshape(4))
        scale = np.maximum(np.array(self.scale, dtype=float).reshape(3), self.s_min)
        logits = np.array(self.logits, dtype=float).reshape(-1)
        opacity = float(self.opacity)
        if not 0.0 <= opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
        for arr in (mean, rot, scale, logits):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "opacity", opacity)

    @property
    def n_classes(self) -> int:
        return self.logits.shape[0]

    @property
    def n_properties(self) -> int:
        return 11 + self.n_classes

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.rotation, self.scale, [self.opacity], self.logits])

    def covariance(self) -> Covariance:
        return covariance(self.rotation, self.scale, self.s_min)


def gaussian_eval(g: SemanticGaussian, x) -> np.ndarray:
    """Value of ``g`` at ``x``; ``x`` may be a point or an ``(N, 3)`` array."""
    x = np.asarray(x, dtype=float)
    rot = quat_to_rot(g.rotation)
    inv_s2 = 1.0 / (g.scale * g.scale)
    q = mahalanobis_sq(x - g.mean, rot, inv_s2)
    w = g.opacity * np.exp(-0.5 * q)
    return w[..., None] * g.logits


class GaussianSet:
    """Struct-of-arrays container of ``N`` Gaussians sharing a class count.

    Construction applies the same constraints as :class:`SemanticGaussian`:
    quaternions are normalized, scales floored at ``s_min`` and opacities
    clipped to ``[0, 1]``.
    """

    def __init__(self, means, rotations, scales, opacities, logits, s_min: float = S_MIN):
        means = np.array(means, dtype=float).reshape(-1, 3)
        n = means.shape[0]
        rotations = np.array(rotations, dtype=float).reshape(n, 4)
        if n:
            rotations = _unit_quat(rotations)
        scales = np.maximum(np.array(scales, dtype=float).reshape(n, 3), s_min)
        opacities = np.clip(np.array(opacities, dtype=float).reshape(n), 0.0, 1.0)
        logits = np.array(logits, dtype=float)
        logits = logits.reshape(n, -1) if n else logits.reshape(0, logits.shape[-1] if logits.ndim > 1 else 0)
        for arr in (means, rotations, scales, opacities, logits):
            arr.setflags(write=False)
        self.means, self.rotations, self.scales = means, rotations, scales
        self.opacities, self.logits, self.s_min = opacities, logits, s_min

    @classmethod
    def empty(cls, n_classes: int) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, n_classes)))

    @classmethod
    def from_list(cls, gaussians: Sequence[SemanticGaussian]) -> "GaussianSet":
        if not gaussians:
            raise ValueError("use GaussianSet.empty for an empty set")
        return cls([g.mean for g in gaussians], [g.rotation for g in gaussians],
                   [g.scale for g in gaussians], [g.opacity for g in gaussians],
                   [g.logits for g in gaussians], gaussians[0].s_min)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> SemanticGaussian:
        return SemanticGaussian(self.means[i], self.rotations[i], self.scales[i],
                                self.opacities[i], self.logits[i], self.s_min)

    def __iter__(self) -> Iterable[SemanticGaussian]:
        return (self[i] for i in range(len(self)))

    def to_list(self) -> list[SemanticGaussian]:
        return list(self)

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    def rotation_matrices(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return quat_to_rot(self.rotations)

    def replace(self, **fields) -> "GaussianSet":
        current = dict(means=self.means, rotations=self.rotations, scales=self.scales,
                       opacities=self.opacities, logits=self.logits)
        current.update(fields)
        return GaussianSet(s_min=self.s_min, **current)

    def as_matrix(self) -> np.ndarray:
        """``(N, 11 + |C|)`` property matrix in (mean, rotation, scale, opacity, logits) order."""
        return np.concatenate([self.means, self.rotations, self.scales,
                               self.opacities[:, None], self.logits], axis=1)

    def equals(self, other: "GaussianSet") -> bool:
        return len(self) == len(other) and np.array_equal(self.as_matrix(), other.as_matrix())


def write_goc(path, gaussians: GaussianSet) -> None:
    """Binary dump: magic, little-endian uint32 count and class count, float32 rows."""
    rows = gaussians.as_matrix().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(GOC_MAGIC)
        fh.write(struct.pack("<II", len(gaussians), gaussians.n_classes))
        fh.write(rows.tobytes())


def read_goc(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if data[:4] != GOC_MAGIC:
        raise ValueError(f"{path}: not a Gaussian dump (bad magic)")
    count, n_classes = struct.unpack_from("<II", data, 4)
    d = 11 + n_classes
    rows = np.frombuffer(data, dtype="<f4", count=count * d, offset=12).astype(float)
    if count == 0:
        return GaussianSet.empty(n_classes)
    rows = rows.reshape(count, d)
    return GaussianSet(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:])


def write_ply(path, points: np.ndarray, labels: np.ndarray) -> None:
    """ASCII PLY with one colored vertex per point."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    colors = PALETTE[np.asarray(labels, dtype=int) % len(PALETTE)]
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(points, colors)]
    Path(path).write_text("\n".join(lines) + "\n")


def export_gaussians_ply(path, gaussians: GaussianSet) -> None:
    labels = np.argmax(gaussians.logits, axis=1) if len(gaussians) else np.zeros(0, dtype=int)
    write_ply(path, gaussians.means, labels)


def read_ply_vertex_count(path) -> int:
    for line in Path(path).read_text().splitlines():
        if line.startswith("element vertex"):
            return int(line.split()[-1])
        if line == "end_header":
            break
    raise ValueError(f"{path}: no vertex element")
