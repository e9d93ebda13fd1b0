"""Tri-plane + MLP signed distance model with hand-written reverse mode.

Three axis-aligned feature planes (XY, XZ, YZ) are sampled bilinearly and
summed into a ``C``-vector, which an MLP ``C -> H -> H -> 1`` (ReLU hidden
layers) maps to a distance.  The network output is multiplied by the cube
half-extent so the parameters live at unit scale while distances are in mm.

The backward passes are written out for exactly this graph; there is no
general autodiff machinery here.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from ._accel import njit
from .geometry import BoundingCube, VoxelGrid
from .optim import Adam
from .sdf_build import grid_sample

log = logging.getLogger(__name__)

PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class NeuralSdfDims:
    resolution: int = 128
    channels: int = 32
    hidden: int = 196


@dataclass
class FitConfig:
    band_samples: int = 70_000
    uniform_samples: int = 30_000
    band: float = 4.0
    epochs: int = 10
    learning_rate: float = 1e-3
    final_lr_fraction: float = 0.05
    plane_lr_scale: float = 1.0
    batch_size: int = 2048
    loss: str = "l1"
    holdout_samples: int = 20_000
    max_band_error: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.band_samples <= 0 or self.uniform_samples < 0 or self.batch_size <= 0:
            raise ValueError("sample counts must be positive")
        if not self.band > 0:
            raise ValueError("band must be positive")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")


class FitError(RuntimeError):
    def __init__(self, msg, band_error):
        super().__init__(msg)
        self.band_error = band_error


# ------------------------------------------------------------------ kernels

@njit(fastmath=True)
def _triplane_sample_numba(planes, uv_all, with_dfeat=True):
    # planes (3, R, R, C); uv_all (3, m, 2) in texel units, already clamped
    P, R, _, C = planes.shape
    m = uv_all.shape[1]
    feat = np.zeros((m, C), dtype=planes.dtype)
    dfeat = np.zeros((P, 2, m if with_dfeat else 0, C), dtype=planes.dtype)
    for p in range(P):
        for i in range(m):
            u = uv_all[p, i, 0]
            v = uv_all[p, i, 1]
            i0 = min(int(np.floor(u)), R - 2)
            j0 = min(int(np.floor(v)), R - 2)
            fu = u - i0
            fv = v - j0
            for c in range(C):
                t00 = planes[p, i0, j0, c]
                t10 = planes[p, i0 + 1, j0, c]
                t01 = planes[p, i0, j0 + 1, c]
                t11 = planes[p, i0 + 1, j0 + 1, c]
                a = t00 + fu * (t10 - t00)
                b = t01 + fu * (t11 - t01)
                feat[i, c] += a + fv * (b - a)
                if with_dfeat:
                    dfeat[p, 0, i, c] = (t10 - t00) * (1 - fv) + (t11 - t01) * fv
                    dfeat[p, 1, i, c] = b - a
    return feat, dfeat


@njit(fastmath=True)
def _triplane_scatter_numba(grad_feat, uv_all, R):
    P = uv_all.shape[0]
    m, C = grad_feat.shape
    out = np.zeros((P, R, R, C), dtype=grad_feat.dtype)
    for p in range(P):
        for i in range(m):
            u = uv_all[p, i, 0]
            v = uv_all[p, i, 1]
            i0 = min(int(np.floor(u)), R - 2)
            j0 = min(int(np.floor(v)), R - 2)
            fu = u - i0
            fv = v - j0
            w00 = (1 - fu) * (1 - fv)
            w10 = fu * (1 - fv)
            w01 = (1 - fu) * fv
            w11 = fu * fv
            for c in range(C):
                g = grad_feat[i, c]
                out[p, i0, j0, c] += w00 * g
                out[p, i0 + 1, j0, c] += w10 * g
                out[p, i0, j0 + 1, c] += w01 * g
                out[p, i0 + 1, j0 + 1, c] += w11 * g
    return out


def _corners(uv, R):
    i0 = np.minimum(np.floor(uv).astype(np.int64), R - 2)
    f = (uv - i0).astype(uv.dtype)
    return i0[..., 0], i0[..., 1], f[..., 0:1], f[..., 1:2]


def _triplane_sample_numpy(planes, uv_all, with_dfeat=True):
    P, R, _, C = planes.shape
    m = uv_all.shape[1]
    feat = np.zeros((m, C), dtype=planes.dtype)
    dfeat = np.empty((P, 2, m if with_dfeat else 0, C), dtype=planes.dtype)
    for p in range(P):
        i0, j0, fu, fv = _corners(uv_all[p], R)
        pl = planes[p]
        t00, t10 = pl[i0, j0], pl[i0 + 1, j0]
        t01, t11 = pl[i0, j0 + 1], pl[i0 + 1, j0 + 1]
        a = t00 + fu * (t10 - t00)
        b = t01 + fu * (t11 - t01)
        feat += a + fv * (b - a)
        if with_dfeat:
            dfeat[p, 0] = (t10 - t00) * (1 - fv) + (t11 - t01) * fv
            dfeat[p, 1] = b - a
    return feat, dfeat


def _triplane_scatter_numpy(grad_feat, uv_all, R):
    P = uv_all.shape[0]
    m, C = grad_feat.shape
    out = np.zeros((P, R * R, C), dtype=grad_feat.dtype)
    for p in range(P):
        i0, j0, fu, fv = _corners(uv_all[p], R)
        idx = np.concatenate([i0 * R + j0, (i0 + 1) * R + j0, i0 * R + j0 + 1, (i0 + 1) * R + j0 + 1])
        w = np.concatenate([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])[:, 0]
        g = np.tile(grad_feat, (4, 1)) * w[:, None]
        order = np.argsort(idx, kind="stable")
        idx, g = idx[order], g[order]
        uniq, start = np.unique(idx, return_index=True)
        out[p, uniq] = np.add.reduceat(g, start, axis=0)
    return out.reshape(P, R, R, C)


# ------------------------------------------------------------------ model

@dataclass(frozen=True, eq=False)
class TriPlane:
    planes: np.ndarray  # (3, R, R, C)
    cube: BoundingCube

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    def texel_coords(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Clamped texel coordinates ``(3, m, 2)`` and the per-axis clamp mask."""
        R = self.resolution
        u = (np.asarray(x, dtype=np.float64) - self.cube.lower) / (2.0 * self.cube.half_extent) * (R - 1)
        inside = (u >= 0) & (u <= R - 1)
        u = np.clip(u, 0, R - 1)
        uv = np.stack([u[:, list(ax)] for ax in PLANE_AXES])
        return np.ascontiguousarray(uv, dtype=self.planes.dtype), inside


def triplane_encode(tp: TriPlane, x, with_grad: bool = False):
    """Summed bilinear plane features at points ``x``; optionally ``d feature / d x`` (m, 3, C)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    uv, inside = tp.texel_coords(x)
    fn = _triplane_sample_numba if _accel.USE_NUMBA else _triplane_sample_numpy
    feat, dfeat = fn(tp.planes, uv)
    if not with_grad:
        return feat
    R = tp.resolution
    k = (R - 1) / (2.0 * tp.cube.half_extent)
    J = np.zeros((len(x), 3, tp.channels), dtype=feat.dtype)
    for p, (a0, a1) in enumerate(PLANE_AXES):
        J[:, a0] += dfeat[p, 0]
        J[:, a1] += dfeat[p, 1]
    J *= k * inside[:, :, None]
    return feat, J


@dataclass(frozen=True, eq=False)
class Mlp:
    weights: tuple  # (W1, W2, W3), Wk shape (in, out)
    biases: tuple

    def __post_init__(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("inconsistent MLP layer sizes")


@dataclass
class _Tape:
    x: np.ndarray
    uv: np.ndarray
    inside: np.ndarray
    feat: np.ndarray
    dfeat: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray


@dataclass(frozen=True, eq=False)
class NeuralSdf:
    triplane: TriPlane
    mlp: Mlp
    cube: BoundingCube
    scan_id: str = ""

    @property
    def output_scale(self) -> float:
        return self.cube.half_extent

    @property
    def dtype(self):
        return self.triplane.planes.dtype

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: planes, W1, b1, W2, b2, W3, b3."""
        out = [self.triplane.planes]
        for W, b in zip(self.mlp.weights, self.mlp.biases):
            out += [W, b]
        return out

    def with_parameters(self, params) -> "NeuralSdf":
        planes, rest = params[0], params[1:]
        mlp = Mlp(tuple(rest[0::2]), tuple(rest[1::2]))
        return replace(self, triplane=TriPlane(planes, self.cube), mlp=mlp)

    def astype(self, dtype) -> "NeuralSdf":
        return self.with_parameters([np.asarray(p, dtype=dtype) for p in self.parameters()])

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def evaluate(self, x, grad: bool = False, chunk: int = 16384):
        """Distances (and ``d/dx`` when ``grad``) in chunks to bound memory."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        vals = np.empty(len(x))
        grads = np.empty((len(x), 3)) if grad else None
        for s in range(0, len(x), chunk):
            v, tape = self.forward(x[s:s + chunk], with_dfeat=grad)
            vals[s:s + chunk] = v
            if grad:
                grads[s:s + chunk] = self.grad_x(tape)
        return (vals, grads) if grad else vals

    # forward and the two backward passes

    def forward(self, x, with_dfeat: bool = True) -> tuple[np.ndarray, _Tape]:
        """Values and the tape; ``with_dfeat=False`` skips what :meth:`grad_x` needs."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        uv, inside = self.triplane.texel_coords(x)
        fn = _triplane_sample_numba if _accel.USE_NUMBA else _triplane_sample_numpy
        feat, dfeat = fn(self.triplane.planes, uv, with_dfeat)
        (W1, W2, W3), (b1, b2, b3) = self.mlp.weights, self.mlp.biases
        z1 = feat @ W1 + b1
        h1 = np.maximum(z1, 0)
        z2 = h1 @ W2 + b2
        h2 = np.maximum(z2, 0)
        out = (h2 @ W3 + b3)[:, 0] * self.output_scale
        return out.astype(np.float64), _Tape(x, uv, inside, feat, dfeat, z1, h1, z2, h2)

    def _backward_features(self, tape: _Tape, upstream):
        (W1, W2, W3), _ = self.mlp.weights, self.mlp.biases
        go = (np.asarray(upstream, dtype=self.dtype) * self.dtype.type(self.output_scale))[:, None]
        gh2 = go @ W3.T
        gz2 = gh2 * (tape.z2 > 0)
        gh1 = gz2 @ W2.T
        gz1 = gh1 * (tape.z1 > 0)
        return go, gz2, gz1, gz1 @ W1.T

    def grad_x(self, tape: _Tape, upstream=None) -> np.ndarray:
        """``upstream_i * d phi / d x_i`` per point (m, 3); upstream defaults to ones."""
        m = len(tape.x)
        up = np.ones(m) if upstream is None else upstream
        gF = self._backward_features(tape, up)[3]
        R = self.triplane.resolution
        k = (R - 1) / (2.0 * self.cube.half_extent)
        g = np.zeros((m, 3))
        for p, (a0, a1) in enumerate(PLANE_AXES):
            g[:, a0] += np.einsum("ij,ij->i", gF, tape.dfeat[p, 0])
            g[:, a1] += np.einsum("ij,ij->i", gF, tape.dfeat[p, 1])
        return g * k * tape.inside

    def grad_params(self, tape: _Tape, upstream) -> list[np.ndarray]:
        """Gradient of ``sum(upstream * phi)`` w.r.t. :meth:`parameters`."""
        go, gz2, gz1, gF = self._backward_features(tape, upstream)
        fn = _triplane_scatter_numba if _accel.USE_NUMBA else _triplane_scatter_numpy
        gP = fn(np.ascontiguousarray(gF), tape.uv, self.triplane.resolution)
        return [gP,
                tape.feat.T @ gz1, gz1.sum(axis=0),
                tape.h1.T @ gz2, gz2.sum(axis=0),
                tape.h2.T @ go, go.sum(axis=0)]


def init_neural_sdf(cube: BoundingCube, dims: NeuralSdfDims = NeuralSdfDims(), seed: int = 0,
                    scan_id: str = "", dtype=np.float32) -> NeuralSdf:
    """Planes ~ N(0, 0.01), He-initialized MLP, zero biases."""
    rng = np.random.default_rng(seed)
    R, C, H = dims.resolution, dims.channels, dims.hidden
    planes = rng.normal(0.0, 0.01, size=(3, R, R, C))
    sizes = [C, H, H, 1]
    Ws = tuple(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)).astype(dtype) for a, b in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(b, dtype=dtype) for b in sizes[1:])
    return NeuralSdf(TriPlane(planes.astype(dtype), cube), Mlp(Ws, bs), cube, scan_id)


def zero_neural_sdf(cube: BoundingCube, dims: NeuralSdfDims = NeuralSdfDims(), dtype=np.float32) -> NeuralSdf:
    nsdf = init_neural_sdf(cube, dims, dtype=dtype)
    return nsdf.with_parameters([np.zeros_like(p) for p in nsdf.parameters()])


def sdf_eval(nsdf: NeuralSdf, x, grad_x: bool = False, grad_params_upstream=None):
    """Signed distances at ``x``; optionally ``d/dx`` per point and/or parameter gradients.

    Returns ``values`` alone, or a tuple ``(values, grad_x?, grad_params?)`` in that order
    for whichever extras were requested.
    """
    vals, tape = nsdf.forward(x)
    extras = []
    if grad_x:
        extras.append(nsdf.grad_x(tape))
    if grad_params_upstream is not None:
        extras.append(nsdf.grad_params(tape, grad_params_upstream))
    return (vals, *extras) if extras else vals


# ------------------------------------------------------------------ training

def sample_band(target: VoxelGrid, count: int, band: float, rng) -> np.ndarray:
    """Uniform samples from ``{x : |target(x)| <= band}``.

    Candidates are drawn uniformly inside lattice cells that can intersect the
    band, then rejected on the trilinear value.
    """
    V = target.values
    h = target.spacing
    lo = np.minimum.reduce([V[a:a + V.shape[0] - 1, b:b + V.shape[1] - 1, c:c + V.shape[2] - 1]
                            for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    hi = np.maximum.reduce([V[a:a + V.shape[0] - 1, b:b + V.shape[1] - 1, c:c + V.shape[2] - 1]
                            for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    cells = np.argwhere((lo <= band) & (hi >= -band))
    if len(cells) == 0:
        raise ValueError("target has no surface band")
    lower = target.cube.lower
    out, have = [], 0
    while have < count:
        m = max(2 * (count - have), 1024)
        pick = cells[rng.integers(0, len(cells), m)]
        x = lower + h * (pick + rng.random((m, 3)))
        v, _ = grid_sample(target, x)
        keep = x[np.abs(v) <= band]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:count]


def _band_or_uniform(target: VoxelGrid, count: int, band: float, cube: BoundingCube, rng) -> np.ndarray:
    try:
        return sample_band(target, count, band, rng)
    except ValueError:
        # no zero crossing near the band (e.g. a constant field): fall back to the whole domain
        return cube.lower + 2.0 * cube.half_extent * rng.random((count, 3))


def band_error(nsdf: NeuralSdf, target: VoxelGrid, points) -> float:
    pred = sdf_eval(nsdf, points)
    ref, _ = grid_sample(target, points)
    return float(np.mean(np.abs(pred - ref)))


@dataclass
class FitReport:
    scan_id: str
    band_mae: float
    uniform_mae: float
    loss_trace: list = field(default_factory=list)


def fit(target: VoxelGrid, config: FitConfig = FitConfig(), dims: NeuralSdfDims = NeuralSdfDims(),
        scan_id: str = "", cube: BoundingCube | None = None, raise_on_failure: bool = True):
    """Train a tri-plane SDF against ``target`` (trilinear regression targets).

    Returns ``(nsdf, report)``; raises :class:`FitError` if the held-out band
    error exceeds ``config.max_band_error`` and ``raise_on_failure`` is set.
    """
    if not np.all(np.isfinite(target.values)):
        raise ValueError("target grid must be finite")
    cube = cube or target.cube
    rng = np.random.default_rng(config.seed)
    nsdf = init_neural_sdf(cube, dims, seed=config.seed, scan_id=scan_id)
    params = [p.copy() for p in nsdf.parameters()]
    nsdf = nsdf.with_parameters(params)
    opt_planes = Adam(params[:1], lr=config.learning_rate * config.plane_lr_scale)
    opt_mlp = Adam(params[1:], lr=config.learning_rate)
    trace = []
    bs = config.batch_size
    for epoch in range(config.epochs):
        # cosine decay from the base rate down to final_lr_fraction of it
        frac = config.final_lr_fraction + (1 - config.final_lr_fraction) * 0.5 * (
            1 + np.cos(np.pi * epoch / max(config.epochs - 1, 1)))
        opt_planes.lr = frac * config.learning_rate * config.plane_lr_scale
        opt_mlp.lr = frac * config.learning_rate
        # fresh samples every epoch so sparse texels see new targets
        xb = _band_or_uniform(target, config.band_samples, config.band, cube, rng)
        xu = cube.lower + 2.0 * cube.half_extent * rng.random((config.uniform_samples, 3))
        X = np.concatenate([xb, xu])
        Y, _ = grid_sample(target, X)
        perm = rng.permutation(len(X))
        tot = 0.0
        for s in range(0, len(X), bs):
            idx = perm[s:s + bs]
            pred, tape = nsdf.forward(X[idx])
            r = pred - Y[idx]
            if config.loss == "l1":
                up = np.sign(r) / len(idx)
                tot += np.abs(r).sum()
            else:
                up = 2.0 * r / len(idx)
                tot += (r * r).sum()
            g = nsdf.grad_params(tape, up)
            opt_planes.step(g[:1])
            opt_mlp.step(g[1:])
        trace.append(tot / len(X))
    hold_b = _band_or_uniform(target, config.holdout_samples, config.band, cube, rng)
    hold_u = cube.lower + 2.0 * cube.half_extent * rng.random((config.holdout_samples, 3))
    report = FitReport(scan_id, band_error(nsdf, target, hold_b), band_error(nsdf, target, hold_u), trace)
    log.info("fit %s: band MAE %.3f mm, domain MAE %.3f mm", scan_id, report.band_mae, report.uniform_mae)
    if raise_on_failure and report.band_mae > config.max_band_error:
        raise FitError(f"{scan_id}: band MAE {report.band_mae:.3f} mm exceeds {config.max_band_error} mm",
                       report.band_mae)
    return nsdf, report


# ------------------------------------------------------------------ files

_NSDF_MAGIC = b"SKNS"
_NSDF_HEADER = struct.Struct("<4sIIII3dd")  # magic, version, R, C, H, center, half_extent


def save_neural_sdf(path, nsdf: NeuralSdf) -> None:
    """Header, then float32 planes (3, R, R, C) C-order, then W1 b1 W2 b2 W3 b3 C-order."""
    tp = nsdf.triplane
    c = nsdf.cube
    hdr = _NSDF_HEADER.pack(_NSDF_MAGIC, 1, tp.resolution, tp.channels, nsdf.mlp.weights[0].shape[1],
                            *c.center, c.half_extent)
    sid = nsdf.scan_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(struct.pack("<I", len(sid)) + sid)
        for p in nsdf.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_neural_sdf(path) -> NeuralSdf:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, R, C, H, cx, cy, cz, half = _NSDF_HEADER.unpack_from(raw, 0)
    if magic != _NSDF_MAGIC or version != 1:
        raise ValueError(f"{path}: not a neural SDF file")
    off = _NSDF_HEADER.size
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    sid = raw[off:off + n].decode("utf-8")
    off += n
    cube = BoundingCube((cx, cy, cz), half)
    shapes = [(3, R, R, C), (C, H), (H,), (H, H), (H,), (H, 1), (1,)]
    params = []
    for s in shapes:
        cnt = int(np.prod(s))
        params.append(np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).reshape(s).astype(np.float32))
        off += 4 * cnt
    template = zero_neural_sdf(cube, NeuralSdfDims(R, C, H))
    return replace(template.with_parameters(params), scan_id=sid)
