"""Synthetic heads with known skull poses, and teeth-region bracket scoring.

A head is star-shaped about the origin: along each unit direction ``u`` the
surface sits at ``skull(u) + thickness_e(u)``.  The frame is x lateral, y up,
z forward (the face looks down +z).  Expression soft tissue only ever
thickens outside a stable forehead/nose-bridge patch, so the stable hull is
close to the skull there by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import (DualQuat, PointSet, TransformSet, TriangleMesh, dq_apply, dq_from_rt, dq_identity)
from .primitives import icosphere

BRACKETS = (1.0, 2.0, 3.0)


# ------------------------------------------------------------------ bumps

@dataclass(frozen=True)
class Bump:
    """Smooth angular bump centered at (azimuth, elevation) degrees; ``power`` > 2 flattens its top."""
    azimuth: float
    elevation: float
    width_az: float
    width_el: float
    amplitude: float
    power: float = 2.0
    mirror: bool = False

    def __call__(self, az, el) -> np.ndarray:
        out = self._one(az, el, self.azimuth)
        if self.mirror:
            out = np.maximum(out, self._one(az, el, -self.azimuth))
        return self.amplitude * out

    def _one(self, az, el, az0):
        daz = (az - az0 + 180.0) % 360.0 - 180.0
        q = (daz * np.cos(np.radians(self.elevation)) / self.width_az) ** 2 + \
            ((el - self.elevation) / self.width_el) ** 2
        return np.exp(-0.5 * q ** (self.power / 2.0))


def _bumps(items):
    return tuple(b if isinstance(b, Bump) else Bump(**b) for b in items)


def directions_to_angles(u) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    az = np.degrees(np.arctan2(u[..., 0], u[..., 2]))
    el = np.degrees(np.arcsin(np.clip(u[..., 1], -1.0, 1.0)))
    return az, el


# ------------------------------------------------------------------ spec

@dataclass(frozen=True)
class Expression:
    name: str
    bumps: tuple = ()
    teeth_exposed: bool = False
    pose: tuple = (1.0, 0, 0, 0, 0, 0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "bumps", _bumps(self.bumps))
        object.__setattr__(self, "pose", tuple(float(v) for v in self.pose))


# skull shape shared by every subject before per-subject scaling
_SKULL_FEATURES = (
    Bump(0.0, 16.0, 28.0, 6.0, 3.0),                    # brow ridge
    Bump(0.0, -4.0, 5.0, 11.0, 12.0, power=3.0),        # nasal bone and cartilage
    Bump(42.0, -8.0, 12.0, 9.0, 6.0, mirror=True),      # cheekbones
    Bump(0.0, -44.0, 30.0, 9.0, 5.0),                   # chin
)
_BASE_TISSUE = (
    Bump(40.0, -16.0, 20.0, 14.0, 6.0, mirror=True),    # cheeks
    Bump(0.0, -24.0, 40.0, 8.0, 9.0, power=4.0),        # lips over the teeth
    Bump(0.0, -42.0, 30.0, 10.0, 5.0),                  # chin pad
    Bump(180.0, 30.0, 80.0, 40.0, 3.0),                 # scalp
)
# FACS-like action units as tissue thickening (mm)
ACTION_UNITS = {
    "brow_raise": Bump(0.0, 28.0, 30.0, 10.0, 3.0, power=4.0),
    "brow_lower": Bump(14.0, 16.0, 10.0, 6.0, 4.0, mirror=True),
    "cheek_raise": Bump(36.0, -6.0, 16.0, 10.0, 5.0, power=4.0, mirror=True),
    "nose_wrinkle": Bump(8.0, 0.0, 5.0, 8.0, 3.0, mirror=True),
    "smile": Bump(30.0, -22.0, 14.0, 10.0, 6.0, mirror=True),
    "jaw_drop": Bump(0.0, -40.0, 35.0, 12.0, 8.0),
    "squint": Bump(26.0, 8.0, 10.0, 6.0, 4.0, mirror=True),
    "upper_face": Bump(0.0, 8.0, 55.0, 22.0, 3.0, power=6.0),
}
_EXPRESSION_LIBRARY = (
    ("smile_wide", ("smile", "cheek_raise", "squint"), True),
    ("brow_raise_jaw", ("brow_raise", "jaw_drop"), True),
    ("frown_squint", ("brow_lower", "squint", "nose_wrinkle"), False),
    ("disgust", ("nose_wrinkle", "cheek_raise", "upper_face"), True),
    ("surprise", ("brow_raise", "jaw_drop", "upper_face"), False),
    ("grimace", ("smile", "upper_face", "brow_lower"), True),
    ("scrunch", ("squint", "cheek_raise", "nose_wrinkle", "brow_lower"), False),
    ("shout", ("jaw_drop", "brow_raise", "cheek_raise", "upper_face"), True),
)


@dataclass(frozen=True)
class SynthHeadSpec:
    seed: int = 0
    skull_radii: tuple = (66.0, 82.0, 78.0)
    teeth_elevation: float = -24.0
    teeth_half_azimuth: float = 34.0
    teeth_height: float = 7.0
    teeth_count: int = 8
    base_thickness_min: float = 1.5
    base_thickness: float = 3.0
    expressions: tuple = ()
    stable_region: tuple = (Bump(0.0, 38.0, 36.0, 13.0, 1.0, power=6.0),
                            Bump(0.0, 8.0, 5.0, 5.0, 1.0, power=4.0),
                            Bump(54.0, -2.0, 8.0, 7.0, 1.0, power=4.0, mirror=True))
    noise_sigma: float = 0.1
    subdivisions: int = 6

    def __post_init__(self):
        object.__setattr__(self, "expressions", tuple(
            e if isinstance(e, Expression) else Expression(**e) for e in self.expressions))
        object.__setattr__(self, "stable_region", _bumps(self.stable_region))
        object.__setattr__(self, "skull_radii", tuple(float(r) for r in self.skull_radii))
        if not self.expressions:
            raise ValueError("spec needs at least one expression")
        if DualQuat.from_params(self.expressions[0].pose) != dq_identity():
            raise ValueError("the first (neutral) expression must have the identity pose")
        if self.base_thickness_min < 0 or self.base_thickness < 0 or self.noise_sigma < 0:
            raise ValueError("thicknesses and noise must be non-negative")
        for e in self.expressions:
            if any(b.amplitude < 0 for b in e.bumps):
                raise ValueError(f"{e.name}: deformation amplitudes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthHeadSpec":
        return cls(**d)


def default_spec(seed: int = 0, n_expressions: int = 8, max_angle_deg: float = 6.0,
                 max_translation: float = 12.0) -> SynthHeadSpec:
    """A randomized subject: neutral plus combined-AU expressions under random head poses."""
    rng = np.random.default_rng(seed)
    radii = tuple(float(r) for r in np.array([66.0, 82.0, 78.0]) * rng.uniform(0.94, 1.06, 3))
    lib = [_EXPRESSION_LIBRARY[i] for i in rng.permutation(len(_EXPRESSION_LIBRARY))]
    neutral = Expression("neutral", (replace(ACTION_UNITS["brow_lower"], amplitude=0.5),), False)
    exprs = [neutral]
    for k in range(n_expressions - 1):
        name, aus, teeth = lib[k % len(lib)]
        bumps = tuple(replace(ACTION_UNITS[a], amplitude=ACTION_UNITS[a].amplitude * rng.uniform(0.8, 1.25))
                      for a in aus)
        axis = rng.normal(size=3)
        angle = np.radians(rng.uniform(0.3, 1.0) * max_angle_deg)
        t = rng.normal(size=3)
        t *= rng.uniform(0.3, 1.0) * max_translation / np.linalg.norm(t)
        pose = dq_from_rt(axis, angle, t)
        exprs.append(Expression(f"{name}_{k + 1}", bumps, teeth, tuple(pose.params())))
    return SynthHeadSpec(seed=seed, skull_radii=radii, expressions=tuple(exprs))


def rigid_spec(seed: int = 0, n_expressions: int = 4, max_angle_deg: float = 10.0,
               max_translation: float = 20.0) -> SynthHeadSpec:
    """Zero deformation: every scan is the neutral head under a random pose."""
    spec = default_spec(seed, n_expressions, max_angle_deg, max_translation)
    exprs = [replace(e, bumps=(), teeth_exposed=False) for e in spec.expressions]
    return replace(spec, expressions=tuple(exprs))


# ------------------------------------------------------------------ fields

def skull_radius(spec: SynthHeadSpec, az, el) -> np.ndarray:
    a, b, c = spec.skull_radii
    u = _angles_to_dirs(az, el)
    r = 1.0 / np.sqrt((u[..., 0] / a) ** 2 + (u[..., 1] / b) ** 2 + (u[..., 2] / c) ** 2)
    for f in _SKULL_FEATURES:
        r = r + f(az, el)
    return r + teeth_profile(spec, az, el) * spec.teeth_height


def teeth_mask(spec: SynthHeadSpec, az, el) -> np.ndarray:
    """Plateau in [0, 1] covering the upper-teeth arch."""
    return Bump(0.0, spec.teeth_elevation, spec.teeth_half_azimuth, 4.5, 1.0, power=6.0)(az, el)


def teeth_profile(spec: SynthHeadSpec, az, el) -> np.ndarray:
    """Ridge of individual rounded teeth along the arch."""
    period = 2.0 * spec.teeth_half_azimuth / spec.teeth_count
    ripple = 0.7 + 0.3 * np.cos(2.0 * np.pi * (az + 0.5 * period) / period)
    return teeth_mask(spec, az, el) * ripple


def stable_weight(spec: SynthHeadSpec, az, el) -> np.ndarray:
    w = np.zeros(np.shape(az))
    for b in spec.stable_region:
        w = np.maximum(w, b(az, el))
    return np.clip(w, 0.0, 1.0)


def base_thickness(spec: SynthHeadSpec, az, el) -> np.ndarray:
    s = stable_weight(spec, az, el)
    t = spec.base_thickness + sum(b(az, el) for b in _BASE_TISSUE)
    return spec.base_thickness_min + (1.0 - s) * t


def thickness(spec: SynthHeadSpec, expr: Expression, az, el) -> np.ndarray:
    s = stable_weight(spec, az, el)
    delta = sum((b(az, el) for b in expr.bumps), np.zeros(np.shape(az)))
    t = base_thickness(spec, az, el) + (1.0 - s) * delta
    if expr.teeth_exposed:
        t = t * (1.0 - teeth_mask(spec, az, el))
    return t


def _angles_to_dirs(az, el):
    az, el = np.radians(az), np.radians(el)
    return np.stack([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)], axis=-1)


# ------------------------------------------------------------------ generation

@dataclass(eq=False)
class SynthSubject:
    spec: SynthHeadSpec
    scans: list
    ground_truth: TransformSet
    reference: TriangleMesh
    mask: np.ndarray
    teeth_points: PointSet
    landmarks: dict
    scan_ids: list = field(default_factory=list)


_SPHERES: dict = {}

# landmark directions (azimuth, elevation): eye corners, nose tip, brow, temples.
# Mouth and chin points move too far under expressions for a usable coarse fit.
LANDMARKS = ((-30.0, 8.0), (30.0, 8.0), (-12.0, 8.0), (12.0, 8.0), (0.0, -4.0),
             (0.0, 30.0), (-50.0, 20.0), (50.0, 20.0))


def _unit_sphere(subdivisions):
    if subdivisions not in _SPHERES:
        _SPHERES[subdivisions] = icosphere(subdivisions, 1.0)
    return _SPHERES[subdivisions]


def head_mesh(spec: SynthHeadSpec, expr: Expression) -> TriangleMesh:
    sph = _unit_sphere(spec.subdivisions)
    u = sph.vertices
    az, el = directions_to_angles(u)
    r = skull_radius(spec, az, el) + thickness(spec, expr, az, el)
    return TriangleMesh(u * r[:, None], sph.triangles)


def mask_weights(spec: SynthHeadSpec, reference: TriangleMesh) -> np.ndarray:
    """Upper face: forehead, brows, nose, upper cheeks."""
    az, el = directions_to_angles(reference.vertices / np.linalg.norm(reference.vertices, axis=1, keepdims=True))
    w = Bump(0.0, 14.0, 62.0, 26.0, 1.0, power=8.0)(az, el)
    return np.where(w > 0.05, np.minimum(1.0, 1.5 * w), 0.0)


def check_coverage(spec: SynthHeadSpec, reference: TriangleMesh, mask, minimum: float = 0.10) -> list[float]:
    """Per expression, the fraction of masked directions with near-minimal tissue."""
    u = reference.vertices / np.linalg.norm(reference.vertices, axis=1, keepdims=True)
    az, el = directions_to_angles(u[np.asarray(mask) > 0])
    out = []
    for e in spec.expressions:
        frac = float(np.mean(thickness(spec, e, az, el) <= spec.base_thickness_min + 0.5))
        if frac < minimum:
            raise ValueError(f"{e.name}: only {frac:.1%} of the mask has near-minimal tissue")
        out.append(frac)
    return out


def generate(spec: SynthHeadSpec) -> SynthSubject:
    rng = np.random.default_rng(spec.seed + 7919)
    lm_rng = np.random.default_rng(spec.seed + 104729)
    sph = _unit_sphere(spec.subdivisions)
    reference = head_mesh(spec, spec.expressions[0])
    mask = mask_weights(spec, reference)
    check_coverage(spec, reference, mask)
    for e in spec.expressions:
        if np.min(thickness(spec, e, *directions_to_angles(sph.vertices))) < 0:
            raise ValueError(f"{e.name}: negative tissue thickness")
    scans, poses = [], []
    lm_dirs = _angles_to_dirs(*np.array(LANDMARKS).T)
    lm_az, lm_el = np.array(LANDMARKS).T
    lm_scans = []
    for e in spec.expressions:
        q = DualQuat.from_params(e.pose)
        m = head_mesh(spec, e)
        v = dq_apply(q, m.vertices)
        if spec.noise_sigma > 0:
            v = v + rng.normal(scale=spec.noise_sigma, size=v.shape)
        scans.append(TriangleMesh(v, m.triangles))
        poses.append(q)
        r = skull_radius(spec, lm_az, lm_el) + thickness(spec, e, lm_az, lm_el)
        lm_scans.append(dq_apply(q, lm_dirs * r[:, None]) + lm_rng.normal(scale=1.0, size=(len(lm_dirs), 3)))
    taz, tel = directions_to_angles(sph.vertices)
    sel = teeth_mask(spec, taz, tel) > 0.5
    teeth = sph.vertices[sel] * skull_radius(spec, taz[sel], tel[sel])[:, None]
    r_ref = skull_radius(spec, lm_az, lm_el) + thickness(spec, spec.expressions[0], lm_az, lm_el)
    landmarks = {"reference": (lm_dirs * r_ref[:, None]).tolist(),
                 "scans": [None] + [x.tolist() for x in lm_scans[1:]]}
    return SynthSubject(spec, scans, TransformSet(tuple(poses)), reference, mask, PointSet(teeth), landmarks,
                        [e.name for e in spec.expressions])


# ------------------------------------------------------------------ scoring

@dataclass
class SubjectScore:
    errors: list
    worst: float
    bracket: str


def bracket_label(err: float) -> str:
    for b in BRACKETS:
        if err <= b:
            return f"<={b:g}mm"
    return f">{BRACKETS[-1]:g}mm"


def teeth_errors(Q_est: TransformSet, Q_gt: TransformSet, teeth_points) -> list[float]:
    if len(Q_est) != len(Q_gt):
        raise ValueError("estimated and ground-truth transform sets differ in length")
    x = np.asarray(getattr(teeth_points, "points", teeth_points), dtype=np.float64)
    if len(x) == 0:
        raise ValueError("teeth point set is empty")
    return [float(np.max(np.linalg.norm(dq_apply(a, x) - dq_apply(b, x), axis=1))) for a, b in zip(Q_est, Q_gt)]


def score(Q_est: TransformSet, Q_gt: TransformSet, teeth_points) -> SubjectScore:
    """Worst-case teeth displacement per expression; the subject takes its worst expression."""
    errs = teeth_errors(Q_est, Q_gt, teeth_points)
    worst = max(errs)
    return SubjectScore(errs, worst, bracket_label(worst))


@dataclass
class BracketReport:
    """Per-method cumulative subject counts at <=1, <=2, <=3 mm plus the >3 mm remainder."""
    subjects: list
    methods: dict = field(default_factory=dict)   # method -> list of worst errors (subject order)

    def add(self, method: str, worst_errors) -> None:
        if len(worst_errors) != len(self.subjects):
            raise ValueError("one score per subject required")
        self.methods[method] = [float(e) for e in worst_errors]

    def counts(self, method: str) -> dict:
        e = np.asarray(self.methods[method])
        out = {f"<={b:g}mm": int(np.sum(e <= b)) for b in BRACKETS}
        out[f">{BRACKETS[-1]:g}mm"] = int(np.sum(e > BRACKETS[-1]))
        return out

    def cumulative(self, method: str) -> list[int]:
        c = self.counts(method)
        return [c[f"<={b:g}mm"] for b in BRACKETS]

    def dominates(self, a: str, b: str) -> bool:
        """``a`` is at least as good at every threshold and better at one."""
        ca, cb = self.cumulative(a), self.cumulative(b)
        return all(x >= y for x, y in zip(ca, cb)) and any(x > y for x, y in zip(ca, cb))

    def to_json(self) -> str:
        doc = {"format": "skullcarve-brackets", "version": 1, "subjects": self.subjects,
               "thresholds_mm": list(BRACKETS),
               "methods": {m: {"worst_errors_mm": e, "counts": self.counts(m)} for m, e in self.methods.items()}}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BracketReport":
        doc = json.loads(text)
        rep = cls(list(doc["subjects"]))
        for m, v in doc["methods"].items():
            rep.methods[m] = list(v["worst_errors_mm"])
        return rep

    def table(self) -> str:
        n = len(self.subjects)
        heads = [f"<={b:g}mm" for b in BRACKETS] + [f">{BRACKETS[-1]:g}mm"]
        width = max([len(m) for m in self.methods] + [6])
        lines = [f"{'method':<{width}}  " + "  ".join(f"{h:>8}" for h in heads)]
        for m in self.methods:
            c = self.counts(m)
            lines.append(f"{m:<{width}}  " + "  ".join(f"{100.0 * c[h] / n:7.1f}%" for h in heads))
        lines.append(f"({n} subjects; worst upper-teeth displacement per subject)")
        return "\n".join(lines)


# ------------------------------------------------------------------ files

def write_subject(subject: SynthSubject, directory) -> dict:
    """Emit OBJ scans, reference, mask, landmarks, teeth points and ground truth; returns the manifest."""
    from .meshio import write_obj
    from .stabilize import transforms_to_json

    os.makedirs(directory, exist_ok=True)
    names = []
    for i, (sid, m) in enumerate(zip(subject.scan_ids, subject.scans)):
        name = f"scan_{i:02d}_{sid}.obj"
        write_obj(os.path.join(directory, name), m)
        names.append(name)
    write_obj(os.path.join(directory, "reference.obj"), subject.reference)
    np.savetxt(os.path.join(directory, "mask.txt"), subject.mask, fmt="%.6g")
    with open(os.path.join(directory, "landmarks.json"), "w") as fh:
        json.dump(subject.landmarks, fh, indent=1)
    with open(os.path.join(directory, "teeth.json"), "w") as fh:
        json.dump({"points": subject.teeth_points.points.tolist()}, fh)
    with open(os.path.join(directory, "ground_truth.json"), "w") as fh:
        fh.write(transforms_to_json(subject.ground_truth, subject.scan_ids, "ground-truth"))
    with open(os.path.join(directory, "spec.json"), "w") as fh:
        json.dump(subject.spec.to_dict(), fh, indent=1, sort_keys=True)
    manifest = {"scans": names, "scan_ids": list(subject.scan_ids), "reference": "reference.obj",
                "mask": "mask.txt", "landmarks": "landmarks.json", "output": "out", "cache": "../cache"}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_teeth(path) -> PointSet:
    with open(path) as fh:
        return PointSet(np.asarray(json.load(fh)["points"], dtype=np.float64))
