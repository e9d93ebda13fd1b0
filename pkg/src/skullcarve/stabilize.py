"""Skull carving: coarse alignment, SDF mode pursuit, and joint hull/pose optimization.

Every SDF object used here only needs ``evaluate(points, grad=False)``
returning distances (and ``d/dx`` when ``grad``).  Transform ``i`` maps
reference-frame points into scan ``i``'s frame; transform 0 is the identity
and is never updated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import (BoundingCube, DualQuat, GridLayout, PointSet, TransformSet, bounding_cube,
                       dq_from_matrix, dq_identity, dq_normalize, params_backward, params_to_rt,
                       rigid_points_backward)
from .isosurface import EmptyHull, IsoMesh, ScalarField, extract, vertex_grads
from .optim import Adam

log = logging.getLogger(__name__)


class CarveError(RuntimeError):
    def __init__(self, msg, iteration=None, diagnostics=None):
        super().__init__(msg)
        self.iteration = iteration
        self.diagnostics = diagnostics or {}


# ------------------------------------------------------------------ penalty

def psi(d, bin_size: float):
    """Smooth l0 surrogate ``1 - exp(-d^2 / (2 sigma^2))`` with ``sigma = bin / 2``."""
    if not bin_size > 0:
        raise ValueError("bin size must be positive")
    sigma = 0.5 * bin_size
    return 1.0 - np.exp(-np.square(d) / (2.0 * sigma * sigma))


def psi_grad(d, bin_size: float):
    if not bin_size > 0:
        raise ValueError("bin size must be positive")
    s2 = (0.5 * bin_size) ** 2
    d = np.asarray(d, dtype=np.float64)
    return d / s2 * np.exp(-d * d / (2.0 * s2))


# ------------------------------------------------------------------ configs

def _schedule(s):
    out = tuple((float(b), int(n)) for b, n in s)
    bins = [b for b, _ in out]
    if not bins or any(b <= 0 for b in bins) or any(b2 > b1 for b1, b2 in zip(bins, bins[1:])):
        raise ValueError("bin sizes must be positive and non-increasing")
    if any(n <= 0 for _, n in out):
        raise ValueError("iterations must be positive")
    return out


@dataclass
class CarveConfig:
    grid_points_per_axis: int = 40
    mask_band: float = 4.0
    bin_schedule: tuple = ((2.0, 2000), (1.0, 2000))
    learning_rate: float = 1e-3
    length_scale: float = 10.0
    box_padding: float = 20.0
    no_surface_grad: bool = False
    seed: int = 0

    def __post_init__(self):
        self.bin_schedule = _schedule(self.bin_schedule)
        if self.grid_points_per_axis < 2 or self.mask_band <= 0 or self.learning_rate <= 0:
            raise ValueError("invalid carve config")

    @classmethod
    def from_dict(cls, d: dict) -> "CarveConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bin_schedule"] = [list(x) for x in self.bin_schedule]
        return d


@dataclass
class ModePursuitConfig:
    bin_schedule: tuple = ((8.0, 200), (4.0, 200), (2.0, 200))
    learning_rate: float = 1e-3
    length_scale: float = 10.0
    divergence_factor: float = 10.0
    max_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.bin_schedule = _schedule(self.bin_schedule)
        if self.learning_rate <= 0 or self.length_scale <= 0 or self.divergence_factor <= 1:
            raise ValueError("invalid mode pursuit config")

    @classmethod
    def from_dict(cls, d: dict) -> "ModePursuitConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bin_schedule"] = [list(x) for x in self.bin_schedule]
        return d


@dataclass(frozen=True, eq=False)
class MaskSpec:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if np.any((w < 0) | (w > 1)):
            raise ValueError("mask weights must lie in [0, 1]")
        if np.count_nonzero(w > 0) < 100:
            raise ValueError("mask needs at least 100 vertices with positive weight")
        object.__setattr__(self, "weights", w)

    def masked(self, reference) -> tuple[PointSet, np.ndarray]:
        v = np.asarray(reference.vertices)
        if len(v) != len(self.weights):
            raise ValueError("mask length does not match the reference mesh")
        keep = self.weights > 0
        return PointSet(v[keep]), self.weights[keep]

    @classmethod
    def load(cls, path) -> "MaskSpec":
        return cls(np.loadtxt(path, dtype=np.float64, ndmin=1))

    def save(self, path) -> None:
        np.savetxt(path, self.weights, fmt="%.6g")


@dataclass
class StabilizationResult:
    transforms: TransformSet
    hull: IsoMesh | None
    loss_trace: list
    residuals: list = field(default_factory=list)
    flags: list = field(default_factory=list)


# ------------------------------------------------------------------ params

def _to_internal(q: DualQuat, scale: float) -> np.ndarray:
    p = q.params()
    return np.concatenate([p[:4], p[4:] / scale])


def _to_raw(u, scale: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.concatenate([u[:4], u[4:] * scale])


def _renormalize(u, scale: float) -> np.ndarray:
    return _to_internal(dq_normalize(DualQuat.from_params(_to_raw(u, scale))), scale)


def _rigid(points, p):
    R, t = params_to_rt(p)
    return points @ R.T + t


# ------------------------------------------------------------------ coarse

def kabsch(src, dst, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid ``(R, t)`` with ``R src + t ~ dst`` (Horn/Kabsch)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    H = ((src - cs) * w[:, None]).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _moments(scan):
    if hasattr(scan, "triangles") and len(scan.triangles):
        v, t = scan.vertices, scan.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        w = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        pts = (a + b + c) / 3.0
    else:
        pts = np.asarray(getattr(scan, "points", scan))
        w = np.ones(len(pts))
    w = w / w.sum()
    cen = w @ pts
    d = pts - cen
    cov = (d * w[:, None]).T @ d
    evals, evecs = np.linalg.eigh(cov)
    return cen, evals, evecs


def _pca_rotation(ref_axes, scan_axes, ref_evals, scan_evals, min_gap=0.05):
    gaps = np.diff(ref_evals) / ref_evals[-1]
    if np.any(gaps < min_gap) or np.any(np.diff(scan_evals) / scan_evals[-1] < min_gap):
        return np.eye(3)
    best, best_tr = np.eye(3), -np.inf
    for sx in (1, -1):
        for sy in (1, -1):
            D = np.diag([sx, sy, sx * sy])
            R = scan_axes @ D @ ref_axes.T
            if np.linalg.det(R) < 0:
                R = scan_axes @ np.diag([sx, sy, -sx * sy]) @ ref_axes.T
            if np.trace(R) > best_tr:
                best, best_tr = R, np.trace(R)
    return best


def load_landmarks(path) -> dict:
    """JSON ``{"reference": [[x, y, z], ...], "scans": [[[x, y, z], ...] | null, ...]}``."""
    with open(path) as fh:
        data = json.load(fh)
    if "reference" not in data or "scans" not in data:
        raise ValueError(f"{path}: landmark file needs 'reference' and 'scans'")
    return data


def coarse_align(scans, reference, landmarks: dict | None = None) -> TransformSet:
    """Initial transforms from landmark correspondences, else centroid + principal axes."""
    out = [dq_identity()]
    if landmarks is not None:
        ref_lm = np.asarray(landmarks["reference"], dtype=np.float64).reshape(-1, 3)
        if len(ref_lm) < 3:
            raise ValueError("landmark alignment needs at least 3 correspondences")
        c = ref_lm - ref_lm.mean(axis=0)
        sv = np.linalg.svd(c, compute_uv=False)
        if sv[1] < 1e-6 * max(sv[0], 1e-12):
            raise ValueError("degenerate (collinear) landmarks")
    r_cen, r_ev, r_ax = _moments(reference)
    for i, scan in enumerate(scans[1:], start=1):
        lm = None if landmarks is None else landmarks["scans"][i]
        if lm is not None:
            lm = np.asarray(lm, dtype=np.float64).reshape(-1, 3)
            if len(lm) != len(ref_lm):
                raise ValueError(f"scan {i}: landmark count mismatch")
            R, t = kabsch(ref_lm, lm)
        else:
            s_cen, s_ev, s_ax = _moments(scan)
            R = _pca_rotation(r_ax, s_ax, r_ev, s_ev)
            t = s_cen - R @ r_cen
        out.append(dq_from_matrix(R, t))
    return TransformSet(tuple(out))


# ------------------------------------------------------------------ mode pursuit

def _registration_loss(sdf, points, weights, p, loss_fn, with_grad=True):
    """Weighted mean of ``loss_fn(sdf(R x + t))`` and its gradient in raw params."""
    y = _rigid(points, p)
    if not with_grad:
        d = sdf.evaluate(y)
        return float(weights @ loss_fn(d)[0])
    d, g = sdf.evaluate(y, grad=True)
    val, dval = loss_fn(d)
    gy = (weights * dval)[:, None] * g
    gR, gt = rigid_points_backward(points, gy)
    return float(weights @ val), params_backward(p, gR, gt)


def mode_pursuit_init(sdfs, reference_points, init: TransformSet, config: ModePursuitConfig = ModePursuitConfig(),
                      weights=None) -> StabilizationResult:
    """Per-scan Adam descent of the mean penalty over masked reference points, coarse-to-fine bins."""
    pts = np.asarray(getattr(reference_points, "points", reference_points), dtype=np.float64)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    if config.max_points and len(pts) > config.max_points:
        keep = np.sort(np.random.default_rng(config.seed).choice(len(pts), config.max_points, replace=False))
        pts, w = pts[keep], w[keep]
    w = w / w.sum()
    L = config.length_scale
    out, flags, trace = [init[0]], [False], []
    for i in range(1, len(init)):
        u = _to_internal(dq_normalize(init[i]), L)
        first = None
        scan_trace = []
        diverged = False
        for bin_size, iters in config.bin_schedule:
            fn = lambda d, b=bin_size: (psi(d, b), psi_grad(d, b))
            opt = Adam([u], lr=config.learning_rate)
            for _ in range(iters):
                f, g = _registration_loss(sdfs[i], pts, w, _to_raw(u, L), fn)
                if first is None:
                    first = max(f, 1e-12)
                scan_trace.append(f)
                if not np.isfinite(f) or f > config.divergence_factor * first:
                    diverged = True
                    break
                opt.step([np.concatenate([g[:4], g[4:] * L])])
                u[:] = _renormalize(u, L)
            if diverged:
                break
        trace.append(scan_trace)
        if diverged:
            log.warning("mode pursuit diverged on scan %d; keeping its initialization", i)
            out.append(init[i])
        else:
            out.append(dq_normalize(DualQuat.from_params(_to_raw(u, L))))
        flags.append(diverged)
    return StabilizationResult(TransformSet(tuple(out)), None, trace, flags=flags)


# ------------------------------------------------------------------ carving

def carving_cube(masked_points, padding: float = 20.0) -> BoundingCube:
    return bounding_cube([masked_points], padding)


@dataclass
class CarveStep:
    loss: float
    grads: np.ndarray      # (N, 8) raw-parameter gradients (row 0 unused)
    hull: IsoMesh
    field: ScalarField
    per_scan: np.ndarray   # (N,) mean penalty per scan


class CarvingProblem:
    """Lattice, mask and frozen values fixed at initialization."""

    def __init__(self, sdfs, layout: GridLayout, init: TransformSet, mask_band: float = 4.0):
        if len(sdfs) != len(init) or len(sdfs) < 1:
            raise ValueError("need one transform per SDF")
        self.sdfs = list(sdfs)
        self.layout = layout
        X = layout.points().reshape(-1, 3)
        P0 = [q.params() for q in init]
        vals = np.stack([s.evaluate(_rigid(X, p)) for s, p in zip(self.sdfs, P0)])
        self.active = np.any(np.abs(vals) <= mask_band, axis=0)
        self.frozen = vals.max(axis=0)
        self.X_act = X[self.active]
        self.active_grid = self.active.reshape(layout.shape)

    @property
    def n(self) -> int:
        return len(self.sdfs)

    def field(self, P):
        vals = np.stack([s.evaluate(_rigid(self.X_act, p)) for s, p in zip(self.sdfs, P)])
        arg = np.argmax(vals, axis=0)
        F = self.frozen.copy()
        F[self.active] = vals[arg, np.arange(vals.shape[1])]
        return ScalarField(self.layout, F, self.active_grid), arg

    def hull(self, P) -> IsoMesh:
        return extract(self.field(P)[0])

    def step(self, P, bin_size: float, surface_grad: bool = True) -> CarveStep:
        sf, arg = self.field(P)
        hull = extract(sf)
        V = hull.vertices
        N, M = self.n, len(V)
        gR = np.zeros((N, 3, 3))
        gt = np.zeros((N, 3))
        gV = np.zeros((M, 3))
        per_scan = np.zeros(N)
        RT = [params_to_rt(p) for p in P]
        for i, (sdf, (R, t)) in enumerate(zip(self.sdfs, RT)):
            d, g = sdf.evaluate(V @ R.T + t, grad=True)
            per_scan[i] = float(np.mean(psi(d, bin_size)))
            gy = (psi_grad(d, bin_size) / (N * M))[:, None] * g
            gR[i] += gy.T @ V
            gt[i] += gy.sum(axis=0)
            gV += gy @ R
        if surface_grad:
            G = vertex_grads(hull, gV).reshape(-1)[self.active]
            nz = G != 0
            for i, (sdf, (R, t)) in enumerate(zip(self.sdfs, RT)):
                sel = nz & (arg == i)
                if i == 0 or not sel.any():
                    continue
                x = self.X_act[sel]
                _, g = sdf.evaluate(x @ R.T + t, grad=True)
                gy = G[sel][:, None] * g
                gR[i] += gy.T @ x
                gt[i] += gy.sum(axis=0)
        grads = np.stack([params_backward(P[i], gR[i], gt[i]) for i in range(N)])
        grads[0] = 0.0
        return CarveStep(float(per_scan.mean()), grads, hull, sf, per_scan)


def stable_hull(Q: TransformSet, sdfs, config: CarveConfig = CarveConfig(), cube: BoundingCube | None = None,
                problem: CarvingProblem | None = None) -> IsoMesh:
    """Zero isosurface of ``max_i sdf_i(q_i x)`` over the carving lattice."""
    if problem is None:
        if cube is None:
            raise ValueError("stable_hull needs the carving cube")
        problem = CarvingProblem(sdfs, GridLayout(config.grid_points_per_axis, cube), Q, config.mask_band)
    return problem.hull([q.params() for q in Q])


def residual_stats(sdfs, Q: TransformSet, hull: IsoMesh, bin_size: float = 1.0) -> list[dict]:
    out = []
    for sdf, q in zip(sdfs, Q):
        d = sdf.evaluate(_rigid(hull.vertices, q.params()))
        out.append({
            "median_abs_mm": float(np.median(np.abs(d))),
            "within_bin_fraction": float(np.mean(np.abs(d) <= bin_size)),
            "mean_penalty": float(np.mean(psi(d, bin_size))),
        })
    return out


def skull_carve(sdfs, Q_init: TransformSet, config: CarveConfig, cube: BoundingCube,
                callback=None) -> StabilizationResult:
    """Jointly optimize transforms 1..N-1 and the stable hull with Adam."""
    L = config.length_scale
    layout = GridLayout(config.grid_points_per_axis, cube)
    problem = CarvingProblem(sdfs, layout, Q_init, config.mask_band)
    N = problem.n
    U = np.stack([_to_internal(dq_normalize(q), L) for q in Q_init])
    P = [Q_init[0].params()] + [_to_raw(U[i], L) for i in range(1, N)]
    trace = []
    it = 0
    step = None
    for bin_size, iters in config.bin_schedule:
        opt = Adam([U[1:]] if N > 1 else [], lr=config.learning_rate)
        work = U[1:]
        for _ in range(iters):
            try:
                step = problem.step(P, bin_size, surface_grad=not config.no_surface_grad)
            except EmptyHull as exc:
                raise CarveError(f"stable hull vanished at iteration {it}", it,
                                 {"transforms": [p.tolist() for p in P]}) from exc
            if not np.isfinite(step.loss) or not np.all(np.isfinite(step.grads)):
                raise CarveError(f"non-finite loss at iteration {it}", it,
                                 {"transforms": [p.tolist() for p in P]})
            trace.append(step.loss)
            if callback is not None:
                callback(it, step, P)
            if N > 1:
                g = step.grads[1:].copy()
                g[:, 4:] *= L
                opt.step([g])
                for k in range(len(work)):
                    work[k] = _renormalize(work[k], L)
                U[1:] = work
                P = [Q_init[0].params()] + [_to_raw(U[i], L) for i in range(1, N)]
            it += 1
    final_bin = config.bin_schedule[-1][0]
    hull = problem.hull(P)
    Q = TransformSet(tuple([Q_init[0]] + [dq_normalize(DualQuat.from_params(p)) for p in P[1:]]))
    return StabilizationResult(Q, hull, trace, residual_stats(sdfs, Q, hull, final_bin))


# ------------------------------------------------------------------ output

def transforms_to_json(Q: TransformSet, scan_ids, method: str, residuals=None, extra: dict | None = None) -> str:
    scans = []
    for i, (sid, q) in enumerate(zip(scan_ids, Q)):
        R, t = params_to_rt(q.params())
        M = np.eye(4)
        M[:3, :3], M[:3, 3] = R, t
        entry = {"scan_id": sid, "dual_quaternion": [float(v) for v in q.params()],
                 "matrix": [float(v) for v in M.reshape(-1)]}
        if residuals is not None and i < len(residuals):
            entry["residual"] = residuals[i]
        scans.append(entry)
    doc = {"format": "skullcarve-transforms", "version": 1, "method": method, "scans": scans}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def transforms_from_json(text: str) -> tuple[TransformSet, list]:
    doc = json.loads(text)
    if doc.get("format") != "skullcarve-transforms":
        raise ValueError("not a transforms document")
    qs = [DualQuat.from_params(s["dual_quaternion"]) for s in doc["scans"]]
    return TransformSet(tuple(qs)), [s["scan_id"] for s in doc["scans"]]
