"""Meshes, point sets, cubic lattices and unit dual quaternion rigid transforms.

All lengths are millimeters.  Quaternions are stored as ``(w, x, y, z)``.
A dual quaternion ``q = r + eps*d`` encodes the rigid map ``x -> R(r) x + t``
with ``d = 0.5 * (0, t) * r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MIN_HALF_EXTENT = 1.0


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        t = _frozen(self.triangles, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh has non-finite vertex coordinates")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def points(self) -> np.ndarray:
        return self.vertices

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self, min_area: float = 1e-12) -> "TriangleMesh":
        """Drop zero-area triangles (repeated indices included)."""
        keep = self.triangle_areas() > min_area
        return TriangleMesh(self.vertices, self.triangles[keep])

    def transformed(self, q: "DualQuat") -> "TriangleMesh":
        return TriangleMesh(dq_apply(q, self.vertices), self.triangles)


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points).reshape(-1, 3)
        if len(p) == 0:
            raise ValueError("empty point set")
        if not np.all(np.isfinite(p)):
            raise ValueError("point set has non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class BoundingCube:
    center: tuple
    half_extent: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extent", float(self.half_extent))
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - self.half_extent

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + self.half_extent

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all(np.abs(x - np.asarray(self.center)) <= self.half_extent + tol, axis=-1)


def bounding_cube(scans: Sequence, padding: float = 0.0) -> BoundingCube:
    """Axis-aligned cube enclosing every vertex of every scan, plus ``padding``."""
    if len(scans) == 0:
        raise ValueError("bounding_cube needs at least one scan")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    pts = np.concatenate([np.asarray(getattr(s, "points", s), dtype=np.float64).reshape(-1, 3) for s in scans])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo)) + padding
    # degenerate (single point) input only; small but real extents are kept
    return BoundingCube(center, half if half > 1e-9 else MIN_HALF_EXTENT)


@dataclass(frozen=True)
class GridLayout:
    """Cubic lattice of ``resolution**3`` nodes spanning ``cube`` corner to corner.

    Node ``(i, j, k)`` sits at ``cube.lower + spacing * (i, j, k)``; value arrays
    are indexed ``[i, j, k]`` with ``i`` along x.
    """

    resolution: int
    cube: BoundingCube

    def __post_init__(self):
        if int(self.resolution) < 2:
            raise ValueError("resolution must be >= 2")
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def shape(self) -> tuple:
        n = self.resolution
        return (n, n, n)

    @property
    def spacing(self) -> float:
        return 2.0 * self.cube.half_extent / (self.resolution - 1)

    def index_to_world(self, ijk) -> np.ndarray:
        return self.cube.lower + self.spacing * np.asarray(ijk, dtype=np.float64)

    def world_to_index(self, x) -> np.ndarray:
        """Continuous index coordinates of world points."""
        return (np.asarray(x, dtype=np.float64) - self.cube.lower) / self.spacing

    def points(self) -> np.ndarray:
        """All node positions, shape ``(n, n, n, 3)``."""
        ax = self.cube.lower[:, None] + self.spacing * np.arange(self.resolution)[None, :]
        return np.stack(np.meshgrid(ax[0], ax[1], ax[2], indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    layout: GridLayout
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values).reshape(self.layout.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("voxel grid values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.layout.resolution

    @property
    def cube(self) -> BoundingCube:
        return self.layout.cube

    @property
    def spacing(self) -> float:
        return self.layout.spacing


# ---------------------------------------------------------------- quaternions

def quat_mul(a, b) -> np.ndarray:
    """Hamilton product over the last axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(r) -> np.ndarray:
    w, x, y, z = np.asarray(r, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# ------------------------------------------------------------ dual quaternions

@dataclass(frozen=True, eq=False)
class DualQuat:
    real: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    dual: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        object.__setattr__(self, "real", _frozen(self.real).reshape(4))
        object.__setattr__(self, "dual", _frozen(self.dual).reshape(4))

    @classmethod
    def from_params(cls, p) -> "DualQuat":
        p = np.asarray(p, dtype=np.float64).reshape(8)
        return cls(p[:4], p[4:])

    def params(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])

    def __matmul__(self, other: "DualQuat") -> "DualQuat":
        return dq_compose(self, other)

    def __eq__(self, other):
        return isinstance(other, DualQuat) and np.array_equal(self.params(), other.params())

    def __hash__(self):
        return hash(self.params().tobytes())

    def __repr__(self):
        return f"DualQuat(real={self.real.tolist()}, dual={self.dual.tolist()})"

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(dq_normalize(self).real)

    @property
    def translation(self) -> np.ndarray:
        return params_to_rt(self.params())[1]


def dq_identity() -> DualQuat:
    return DualQuat(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(4))


def dq_from_rt(axis, angle: float, translation) -> DualQuat:
    """Rotation about ``axis`` by ``angle`` radians followed by ``translation``."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if angle != 0.0:
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise ValueError("zero rotation axis with nonzero angle")
        axis = axis / n
    real = np.concatenate([[np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis])
    dual = 0.5 * quat_mul(np.concatenate([[0.0], t]), real)
    return DualQuat(real, dual)


def dq_from_matrix(R, t) -> DualQuat:
    real = matrix_to_quat(R)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return DualQuat(real, 0.5 * quat_mul(np.concatenate([[0.0], t]), real))


def dq_normalize(q: DualQuat) -> DualQuat:
    """Project onto the unit dual quaternions: ``|real| = 1`` and ``real . dual = 0``."""
    n = np.linalg.norm(q.real)
    if n < 1e-12:
        raise ValueError("cannot normalize a dual quaternion with near-zero real part")
    a = q.real / n
    b = q.dual / n
    return DualQuat(a, b - a * np.dot(a, b))


def dq_compose(qa: DualQuat, qb: DualQuat) -> DualQuat:
    """``qa * qb``: apply ``qb`` first, then ``qa``."""
    return DualQuat(quat_mul(qa.real, qb.real), quat_mul(qa.real, qb.dual) + quat_mul(qa.dual, qb.real))


def dq_conjugate(q: DualQuat) -> DualQuat:
    return DualQuat(quat_conj(q.real), quat_conj(q.dual))


def dq_inverse(q: DualQuat) -> DualQuat:
    return dq_conjugate(dq_normalize(q))


def dq_apply(q: DualQuat, x) -> np.ndarray:
    """Rigidly map point(s) ``x`` (shape ``(..., 3)``); ``q`` is normalized first."""
    R, t = params_to_rt(q.params())
    x = np.asarray(x, dtype=np.float64)
    return x @ R.T + t


def dq_to_matrix(q: DualQuat) -> np.ndarray:
    R, t = params_to_rt(q.params())
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def rigid_error(qa: DualQuat, qb: DualQuat) -> tuple[float, float]:
    """Translation distance (mm) and rotation angle (degrees) between two transforms."""
    Ra, ta = params_to_rt(qa.params())
    Rb, tb = params_to_rt(qb.params())
    c = np.clip(0.5 * (np.trace(Ra @ Rb.T) - 1.0), -1.0, 1.0)
    return float(np.linalg.norm(ta - tb)), float(np.degrees(np.arccos(c)))


# Raw 8-parameter interface used by the optimizers.  The parameters drift off
# the unit manifold during descent; every evaluation projects first, so the
# gradients below are those of the composed map params -> normalize -> (R, t).

_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def _lmat(p):
    w, x, y, z = p
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def _rmat(q):
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def _drot(a) -> np.ndarray:
    """d R / d a for the unit-quaternion rotation formula, shape (3, 3, 4)."""
    w, x, y, z = a
    d = np.zeros((3, 3, 4))
    d[0, 0] = [0, 0, -4 * y, -4 * z]
    d[0, 1] = [-2 * z, 2 * y, 2 * x, -2 * w]
    d[0, 2] = [2 * y, 2 * z, 2 * w, 2 * x]
    d[1, 0] = [2 * z, 2 * y, 2 * x, 2 * w]
    d[1, 1] = [0, -4 * x, 0, -4 * z]
    d[1, 2] = [-2 * x, -2 * w, 2 * z, 2 * y]
    d[2, 0] = [-2 * y, 2 * z, -2 * w, 2 * x]
    d[2, 1] = [2 * x, 2 * w, 2 * z, 2 * y]
    d[2, 2] = [0, -4 * x, -4 * y, 0]
    return d


def params_to_rt(p) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and translation of the projected dual quaternion ``p``."""
    p = np.asarray(p, dtype=np.float64)
    r, d = p[:4], p[4:]
    n2 = float(r @ r)
    if n2 < 1e-24:
        raise ValueError("cannot normalize a dual quaternion with near-zero real part")
    R = quat_to_matrix(r / np.sqrt(n2))
    # the dual-part projection leaves the translation unchanged
    t = 2.0 * quat_mul(d, quat_conj(r))[1:] / n2
    return R, t


def params_backward(p, grad_R, grad_t) -> np.ndarray:
    """Pull ``dL/dR`` (3x3) and ``dL/dt`` (3,) back to the 8 raw parameters."""
    p = np.asarray(p, dtype=np.float64)
    r, d = p[:4], p[4:]
    n2 = float(r @ r)
    n = np.sqrt(n2)
    a = r / n
    g_a = np.einsum("ij,ijk->k", np.asarray(grad_R), _drot(a))
    g_r = (g_a - a * (a @ g_a)) / n
    u = quat_mul(d, quat_conj(r))[1:]
    gt = np.asarray(grad_t, dtype=np.float64)
    g_r += (2.0 / n2) * (gt @ (_lmat(d)[1:] * _CONJ[None, :]))
    g_r += -4.0 * (gt @ u) / (n2 * n2) * r
    g_d = (2.0 / n2) * (gt @ _rmat(quat_conj(r))[1:])
    return np.concatenate([g_r, g_d])


def rigid_points_backward(x, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """For ``y = x R^T + t``, return ``(dL/dR, dL/dt)`` given ``dL/dy``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 3)
    return g.T @ x, g.sum(axis=0)


@dataclass(frozen=True)
class TransformSet:
    transforms: tuple

    def __post_init__(self):
        ts = tuple(self.transforms)
        if not ts:
            raise ValueError("empty transform set")
        if ts[0] != dq_identity():
            raise ValueError("transforms[0] must be the identity")
        object.__setattr__(self, "transforms", ts)

    def __len__(self):
        return len(self.transforms)

    def __getitem__(self, i):
        return self.transforms[i]

    def __iter__(self):
        return iter(self.transforms)

    @classmethod
    def identity(cls, n: int) -> "TransformSet":
        return cls(tuple(dq_identity() for _ in range(n)))

    def replace(self, i: int, q: DualQuat) -> "TransformSet":
        if i == 0:
            raise ValueError("transforms[0] is fixed")
        ts = list(self.transforms)
        ts[i] = q
        return TransformSet(tuple(ts))
