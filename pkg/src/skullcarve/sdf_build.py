"""Scan to signed distance grid: winding-number signs, exact narrow band, fast sweeping."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _accel
from ._accel import njit
from .geometry import GridLayout, PointSet, TriangleMesh, VoxelGrid, BoundingCube

log = logging.getLogger(__name__)

WINDING_THRESHOLD = 0.5
SWEEP_TOL = 1e-6
_FAR = 1e30


@dataclass(frozen=True, eq=False)
class SignField:
    grid: VoxelGrid
    source: str = ""

    @property
    def signs(self) -> np.ndarray:
        return self.grid.values


@dataclass(frozen=True, eq=False)
class PartialGrid:
    """Distances known on a subset of nodes; ``values`` is +inf where unset."""

    layout: GridLayout
    values: np.ndarray
    known: np.ndarray


# ------------------------------------------------------------------ winding

@njit(fastmath=True)
def _winding_numba(P, A, B, C):
    n, m = P.shape[0], A.shape[0]
    out = np.empty(n)
    for i in range(n):
        px, py, pz = P[i, 0], P[i, 1], P[i, 2]
        s = 0.0
        for t in range(m):
            ax, ay, az = A[t, 0] - px, A[t, 1] - py, A[t, 2] - pz
            bx, by, bz = B[t, 0] - px, B[t, 1] - py, B[t, 2] - pz
            cx, cy, cz = C[t, 0] - px, C[t, 1] - py, C[t, 2] - pz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
            s += np.arctan2(det, den)
        out[i] = s / (2.0 * np.pi)
    return out


def _winding_numpy(P, A, B, C, chunk=256):
    out = np.empty(len(P))
    for s in range(0, len(P), chunk):
        p = P[s:s + chunk, None, :]
        a, b, c = A[None] - p, B[None] - p, C[None] - p
        la, lb, lc = (np.linalg.norm(v, axis=2) for v in (a, b, c))
        det = np.einsum("ijk,ijk->ij", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ijk,ijk->ij", a, b) * lc
               + np.einsum("ijk,ijk->ij", b, c) * la + np.einsum("ijk,ijk->ij", c, a) * lb)
        out[s:s + chunk] = np.arctan2(det, den).sum(axis=1) / (2.0 * np.pi)
    return out


def winding_numbers(mesh: TriangleMesh, points) -> np.ndarray:
    """Generalized winding number of ``mesh`` at each query point (direct solid-angle sum)."""
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    v, t = mesh.vertices, mesh.triangles
    A, B, C = (np.ascontiguousarray(v[t[:, k]]) for k in range(3))
    if _accel.USE_NUMBA:
        return _winding_numba(P, A, B, C)
    return _winding_numpy(P, A, B, C)


def is_closed(mesh: TriangleMesh) -> bool:
    """True when every directed edge is matched by its reverse (boundary is empty)."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    n = len(mesh.vertices)
    fwd = np.sort(e[:, 0] * n + e[:, 1])
    rev = np.sort(e[:, 1] * n + e[:, 0])
    return bool(np.array_equal(fwd, rev))


@njit
def _cut_edges_numba(A, B, C, lower, h, n, eps):
    # cut[axis, i, j, k]: lattice edge from node (i,j,k) to its +axis neighbour crosses a triangle
    cut = np.zeros((3, n, n, n), dtype=np.bool_)
    idx = np.zeros(3, dtype=np.int64)
    for t in range(A.shape[0]):
        for ax in range(3):
            u = (ax + 1) % 3
            w = (ax + 2) % 3
            au, aw = A[t, u], A[t, w]
            bu, bw = B[t, u], B[t, w]
            cu, cw = C[t, u], C[t, w]
            area = (bu - au) * (cw - aw) - (bw - aw) * (cu - au)
            if abs(area) < 1e-18:
                continue
            umin = (min(au, bu, cu) - lower[u]) / h
            umax = (max(au, bu, cu) - lower[u]) / h
            wmin = (min(aw, bw, cw) - lower[w]) / h
            wmax = (max(aw, bw, cw) - lower[w]) / h
            i0 = max(int(np.floor(umin)), 0)
            i1 = min(int(np.ceil(umax)), n - 1)
            j0 = max(int(np.floor(wmin)), 0)
            j1 = min(int(np.ceil(wmax)), n - 1)
            for iu in range(i0, i1 + 1):
                pu = lower[u] + iu * h
                for iw in range(j0, j1 + 1):
                    pw = lower[w] + iw * h
                    l0 = ((bu - pu) * (cw - pw) - (bw - pw) * (cu - pu)) / area
                    l1 = ((cu - pu) * (aw - pw) - (cw - pw) * (au - pu)) / area
                    l2 = 1.0 - l0 - l1
                    if l0 < -eps or l1 < -eps or l2 < -eps:
                        continue
                    z = l0 * A[t, ax] + l1 * B[t, ax] + l2 * C[t, ax]
                    s = (z - lower[ax]) / h
                    k0 = int(np.floor(s))
                    # a crossing at (or very near) a node cuts both adjacent edges
                    for kk in range(k0 - 1, k0 + 2):
                        if 0 <= kk < n - 1 and s >= kk - eps and s <= kk + 1 + eps:
                            idx[ax] = kk
                            idx[u] = iu
                            idx[w] = iw
                            cut[ax, idx[0], idx[1], idx[2]] = True
    return cut


def _cut_edges_numpy(A, B, C, lower, h, n, eps):
    cut = np.zeros((3, n, n, n), dtype=bool)
    for ax in range(3):
        u, w = (ax + 1) % 3, (ax + 2) % 3
        for t in range(len(A)):
            a, b, c = A[t], B[t], C[t]
            area = (b[u] - a[u]) * (c[w] - a[w]) - (b[w] - a[w]) * (c[u] - a[u])
            if abs(area) < 1e-18:
                continue
            tu = np.array([a[u], b[u], c[u]])
            tw = np.array([a[w], b[w], c[w]])
            i0 = max(int(np.floor((tu.min() - lower[u]) / h)), 0)
            i1 = min(int(np.ceil((tu.max() - lower[u]) / h)), n - 1)
            j0 = max(int(np.floor((tw.min() - lower[w]) / h)), 0)
            j1 = min(int(np.ceil((tw.max() - lower[w]) / h)), n - 1)
            if i1 < i0 or j1 < j0:
                continue
            iu, iw = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
            iu, iw = iu.ravel(), iw.ravel()
            pu, pw = lower[u] + iu * h, lower[w] + iw * h
            l0 = ((b[u] - pu) * (c[w] - pw) - (b[w] - pw) * (c[u] - pu)) / area
            l1 = ((c[u] - pu) * (a[w] - pw) - (c[w] - pw) * (a[u] - pu)) / area
            l2 = 1.0 - l0 - l1
            hit = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
            if not hit.any():
                continue
            iu, iw, l0, l1, l2 = iu[hit], iw[hit], l0[hit], l1[hit], l2[hit]
            s = (l0 * a[ax] + l1 * b[ax] + l2 * c[ax] - lower[ax]) / h
            k0 = np.floor(s).astype(np.int64)
            for off in (-1, 0, 1):
                kk = k0 + off
                ok = (kk >= 0) & (kk < n - 1) & (s >= kk - eps) & (s <= kk + 1 + eps)
                idx = np.empty((3, ok.sum()), dtype=np.int64)
                idx[ax], idx[u], idx[w] = kk[ok], iu[ok], iw[ok]
                cut[ax, idx[0], idx[1], idx[2]] = True
    return cut


def _component_labels(cut: np.ndarray, n: int):
    ids = np.arange(n ** 3).reshape(n, n, n)
    rows, cols = [], []
    for ax in range(3):
        sl = [slice(None)] * 3
        sl[ax] = slice(0, n - 1)
        nxt = [slice(None)] * 3
        nxt[ax] = slice(1, n)
        keep = ~cut[ax][tuple(sl)]
        rows.append(ids[tuple(sl)][keep])
        cols.append(ids[tuple(nxt)][keep])
    r, c = np.concatenate(rows), np.concatenate(cols)
    g = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n ** 3, n ** 3))
    return connected_components(g, directed=False)


def lattice_winding(mesh: TriangleMesh, layout: GridLayout) -> np.ndarray:
    """Winding number at every lattice node, shape ``layout.shape``.

    For closed meshes the winding number is constant on each lattice component
    not separated by the surface, so it is evaluated exactly once per
    component (the result is identical to the per-node sum).  Open meshes get
    the direct sum at every node.
    """
    pts = layout.points().reshape(-1, 3)
    if not is_closed(mesh):
        return winding_numbers(mesh, pts).reshape(layout.shape)
    v, t = mesh.vertices, mesh.triangles
    A, B, C = (np.ascontiguousarray(v[t[:, k]]) for k in range(3))
    n, h, lower = layout.resolution, layout.spacing, np.ascontiguousarray(layout.cube.lower)
    eps = 1e-6
    cut = (_cut_edges_numba if _accel.USE_NUMBA else _cut_edges_numpy)(A, B, C, lower, h, n, eps)
    ncomp, labels = _component_labels(cut, n)
    # two probes per component guard against a missed cut
    order = np.argsort(labels, kind="stable")
    starts = np.searchsorted(labels[order], np.arange(ncomp))
    ends = np.append(starts[1:], len(labels))
    first = order[starts]
    last = order[ends - 1]
    w = winding_numbers(mesh, pts[np.concatenate([first, last])])
    w_first, w_last = w[:ncomp], w[ncomp:]
    if np.any(np.abs(w_first - w_last) > 1e-3):
        log.warning("component winding mismatch; falling back to direct evaluation")
        return winding_numbers(mesh, pts).reshape(layout.shape)
    return w_first[labels].reshape(layout.shape)


def winding_sign(mesh, layout: GridLayout, source: str = "", sign_fn=None) -> SignField:
    """-1 inside (winding > 0.5), +1 outside; the outer lattice shell is forced outside."""
    if isinstance(mesh, PointSet):
        if sign_fn is None:
            raise NotImplementedError("point-cloud signing needs a caller-provided sign_fn")
        w = np.asarray(sign_fn(layout.points().reshape(-1, 3)), dtype=np.float64).reshape(layout.shape)
    else:
        if len(mesh.triangles) == 0:
            raise ValueError("empty mesh")
        w = lattice_winding(mesh, layout)
    frac = np.mean(np.abs(w - np.rint(w)) < 0.05)
    if frac < 0.99:
        log.warning("%s: only %.1f%% of winding numbers are near-integer", source or "mesh", 100 * frac)
    s = np.where(w > WINDING_THRESHOLD, -1.0, 1.0)
    s[0, :, :] = s[-1, :, :] = s[:, 0, :] = s[:, -1, :] = s[:, :, 0] = s[:, :, -1] = 1.0
    return SignField(VoxelGrid(layout, s), source)


# ----------------------------------------------------------- exact band

@njit(fastmath=False)
def _pt_tri_dist(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # closest point on triangle (Ericson, Real-Time Collision Detection 5.1.5)
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = ax, ay, az
    else:
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = bx, by, bz
        else:
            cpx, cpy, cpz = px - cx, py - cy, pz - cz
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            vc = d1 * d4 - d3 * d2
            vb = d5 * d2 - d1 * d6
            va = d3 * d6 - d5 * d4
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                qx, qy, qz = ax + v * abx, ay + v * aby, az + v * abz
            elif d6 >= 0.0 and d5 <= d6:
                qx, qy, qz = cx, cy, cz
            elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                w = d2 / (d2 - d6)
                qx, qy, qz = ax + w * acx, ay + w * acy, az + w * acz
            elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                qx, qy, qz = bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
            else:
                den = 1.0 / (va + vb + vc)
                v = vb * den
                w = vc * den
                qx = ax + abx * v + acx * w
                qy = ay + aby * v + acy * w
                qz = az + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@njit
def _band_numba(A, B, C, lower, h, n, band):
    out = np.full((n, n, n), np.inf)
    r = band / h
    for t in range(A.shape[0]):
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        for d in range(3):
            mn = min(A[t, d], B[t, d], C[t, d])
            mx = max(A[t, d], B[t, d], C[t, d])
            lo[d] = max(int(np.ceil((mn - lower[d]) / h - r)), 0)
            hi[d] = min(int(np.floor((mx - lower[d]) / h + r)), n - 1)
        for i in range(lo[0], hi[0] + 1):
            px = lower[0] + i * h
            for j in range(lo[1], hi[1] + 1):
                py = lower[1] + j * h
                for k in range(lo[2], hi[2] + 1):
                    pz = lower[2] + k * h
                    d = _pt_tri_dist(px, py, pz, A[t, 0], A[t, 1], A[t, 2], B[t, 0], B[t, 1], B[t, 2],
                                     C[t, 0], C[t, 1], C[t, 2])
                    if d < out[i, j, k]:
                        out[i, j, k] = d
    return out


def point_triangle_distance(P, a, b, c) -> np.ndarray:
    """Vectorized exact distance from points ``P`` (m, 3) to triangle ``abc``."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    ab, ac, ap = b - a, c - a, P - a
    d1, d2 = ap @ ab, ap @ ac
    bp = P - b
    d3, d4 = bp @ ab, bp @ ac
    cp = P - c
    d5, d6 = cp @ ab, cp @ ac
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        den = 1.0 / (va + vb + vc)
        q = a + np.outer(vb * den, ab) + np.outer(vc * den, ac)
        r_ab = a + np.outer(d1 / (d1 - d3), ab)
        r_ac = a + np.outer(d2 / (d2 - d6), ac)
        r_bc = b + np.outer((d4 - d3) / ((d4 - d3) + (d5 - d6)), c - b)
    # regions tested in reverse priority so the first matching rule wins
    q = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[:, None], r_bc, q)
    q = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[:, None], r_ac, q)
    q = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, q)
    q = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[:, None], r_ab, q)
    q = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, q)
    q = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, q)
    return np.linalg.norm(P - q, axis=1)


def _band_numpy(A, B, C, lower, h, n, band):
    out = np.full((n, n, n), np.inf)
    r = band / h
    for a, b, c in zip(A, B, C):
        mn, mx = np.minimum(np.minimum(a, b), c), np.maximum(np.maximum(a, b), c)
        lo = np.maximum(np.ceil((mn - lower) / h - r).astype(np.int64), 0)
        hi = np.minimum(np.floor((mx - lower) / h + r).astype(np.int64), n - 1)
        if np.any(hi < lo):
            continue
        sl = tuple(slice(lo[d], hi[d] + 1) for d in range(3))
        ii = np.meshgrid(*[np.arange(lo[d], hi[d] + 1) for d in range(3)], indexing="ij")
        P = lower + h * np.stack([x.ravel() for x in ii], axis=1)
        d = point_triangle_distance(P, a, b, c).reshape(ii[0].shape)
        np.minimum(out[sl], d, out=out[sl])
    return out


def exact_band_distances(mesh: TriangleMesh, layout: GridLayout, band: float) -> PartialGrid:
    """Exact unsigned point-to-triangle distance on nodes within ``band`` of the surface."""
    if len(mesh.triangles) == 0:
        raise ValueError("empty mesh")
    if not band > layout.spacing:
        raise ValueError("band must exceed the voxel size")
    v, t = mesh.vertices, mesh.triangles
    A, B, C = (np.ascontiguousarray(v[t[:, k]]) for k in range(3))
    lower = np.ascontiguousarray(layout.cube.lower)
    fn = _band_numba if _accel.USE_NUMBA else _band_numpy
    d = fn(A, B, C, lower, layout.spacing, layout.resolution, float(band))
    known = d <= band
    d[~known] = np.inf
    return PartialGrid(layout, d, known)


# ----------------------------------------------------------- fast sweeping

@njit
def _godunov(a, b, c, h):
    # sort a <= b <= c
    if a > b:
        a, b = b, a
    if b > c:
        b, c = c, b
    if a > b:
        a, b = b, a
    u = a + h
    if u > b:
        u = 0.5 * (a + b + np.sqrt(2.0 * h * h - (a - b) ** 2))
        if u > c:
            s = a + b + c
            u = (s + np.sqrt(s * s - 3.0 * (a * a + b * b + c * c - h * h))) / 3.0
    return u


@njit
def _sweep_numba(d, fixed, h, tol, max_cycles):
    n = d.shape[0]
    history = np.zeros(max_cycles)
    for cyc in range(max_cycles):
        cyc_change = 0.0
        for sdir in range(8):
            si = 1 if (sdir & 1) == 0 else -1
            sj = 1 if (sdir & 2) == 0 else -1
            sk = 1 if (sdir & 4) == 0 else -1
            for ii in range(n):
                i = ii if si > 0 else n - 1 - ii
                for jj in range(n):
                    j = jj if sj > 0 else n - 1 - jj
                    for kk in range(n):
                        k = kk if sk > 0 else n - 1 - kk
                        if fixed[i, j, k]:
                            continue
                        a = min(d[i - 1, j, k] if i > 0 else _FAR, d[i + 1, j, k] if i < n - 1 else _FAR)
                        b = min(d[i, j - 1, k] if j > 0 else _FAR, d[i, j + 1, k] if j < n - 1 else _FAR)
                        c = min(d[i, j, k - 1] if k > 0 else _FAR, d[i, j, k + 1] if k < n - 1 else _FAR)
                        if a >= _FAR and b >= _FAR and c >= _FAR:
                            continue
                        u = _godunov(a, b, c, h)
                        old = d[i, j, k]
                        if u < old:
                            d[i, j, k] = u
                            ch = (old - u) if old < _FAR else _FAR
                            if ch > cyc_change:
                                cyc_change = ch
        history[cyc] = cyc_change
        if cyc_change <= tol:
            return history[:cyc + 1]
    return history


def _godunov_vec(a, b, c, h):
    s = np.sort(np.stack([a, b, c]), axis=0)
    a, b, c = s
    u = a + h
    with np.errstate(invalid="ignore", over="ignore"):
        two = 0.5 * (a + b + np.sqrt(np.maximum(2.0 * h * h - (a - b) ** 2, 0.0)))
        t = a + b + c
        three = (t + np.sqrt(np.maximum(t * t - 3.0 * (a * a + b * b + c * c - h * h), 0.0))) / 3.0
    u = np.where(u > b, two, u)
    u = np.where(u > c, three, u)
    return u


def _sweep_numpy(d, fixed, h, tol, max_cycles):
    # Jacobi iteration of the same Godunov update; converges to the same fixed point
    history = []
    pad = np.full(tuple(s + 2 for s in d.shape), _FAR)
    for _ in range(max_cycles * 8):
        pad[1:-1, 1:-1, 1:-1] = d
        a = np.minimum(pad[:-2, 1:-1, 1:-1], pad[2:, 1:-1, 1:-1])
        b = np.minimum(pad[1:-1, :-2, 1:-1], pad[1:-1, 2:, 1:-1])
        c = np.minimum(pad[1:-1, 1:-1, :-2], pad[1:-1, 1:-1, 2:])
        reach = (a < _FAR) | (b < _FAR) | (c < _FAR)
        u = np.where(reach & ~fixed, _godunov_vec(a, b, c, h), _FAR)
        upd = u < d
        if not upd.any():
            history.append(0.0)
            break
        old = d[upd]
        ch = np.where(old < _FAR, old - u[upd], _FAR)
        d[upd] = u[upd]
        history.append(float(ch.max()))
        if history[-1] <= tol:
            break
    return np.asarray(history)


def fast_sweep(seeds: PartialGrid, signs: SignField, tol: float = SWEEP_TOL,
               max_cycles: int = 200, return_history: bool = False):
    """Solve ``|grad d| = 1`` from the seeded band outward and apply the signs."""
    if not seeds.known.any():
        raise ValueError("fast_sweep needs at least one seed voxel")
    layout = seeds.layout
    d = np.where(seeds.known, seeds.values, _FAR).astype(np.float64)
    fixed = np.ascontiguousarray(seeds.known)
    if fixed.all():
        hist = np.zeros(0)
    elif _accel.USE_NUMBA:
        hist = _sweep_numba(d, fixed, layout.spacing, tol, max_cycles)
    else:
        hist = _sweep_numpy(d, fixed, layout.spacing, tol, max_cycles)
    if np.any(d >= _FAR):
        raise ValueError("fast sweep left unreachable voxels")
    grid = VoxelGrid(layout, d * signs.signs)
    return (grid, hist) if return_history else grid


def build_sdf(mesh: TriangleMesh, layout: GridLayout, band_voxels: float = 2.0, source: str = "") -> VoxelGrid:
    signs = winding_sign(mesh, layout, source=source)
    seeds = exact_band_distances(mesh, layout, band_voxels * layout.spacing + 1e-9)
    return fast_sweep(seeds, signs)


# ----------------------------------------------------------- sampling

def grid_sample(grid: VoxelGrid, x, return_flags: bool = False):
    """Trilinear value and analytic gradient at points ``x`` (clamped to the cube).

    Returns ``(values, gradients)`` or ``(values, gradients, outside)``.
    """
    x = np.asarray(x, dtype=np.float64)
    shp = x.shape[:-1]
    x = x.reshape(-1, 3)
    n = grid.resolution
    u = grid.layout.world_to_index(x)
    outside = np.any((u < 0) | (u > n - 1), axis=1)
    inside_axis = (u >= 0) & (u <= n - 1)
    u = np.clip(u, 0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    f = u - i0
    V = grid.values
    c = np.empty((len(x), 2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for e in (0, 1):
                c[:, a, b, e] = V[i0[:, 0] + a, i0[:, 1] + b, i0[:, 2] + e]
    fx, fy, fz = f[:, 0, None, None], f[:, 1, None], f[:, 2]
    cx = c[:, 0] * (1 - fx) + c[:, 1] * fx          # (m, 2, 2) over (y, z)
    cxy = cx[:, 0] * (1 - fy) + cx[:, 1] * fy       # (m, 2) over z
    val = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz
    gz = cxy[:, 1] - cxy[:, 0]
    dy = cx[:, 1] - cx[:, 0]
    gy = dy[:, 0] * (1 - fz) + dy[:, 1] * fz
    dx = c[:, 1] - c[:, 0]
    dxy = dx[:, 0] * (1 - fy) + dx[:, 1] * fy
    gx = dxy[:, 0] * (1 - fz) + dxy[:, 1] * fz
    grad = np.stack([gx, gy, gz], axis=1) / grid.spacing
    grad *= inside_axis
    val, grad = val.reshape(shp), grad.reshape(shp + (3,))
    if return_flags:
        return val, grad, outside.reshape(shp)
    return val, grad


class GridSdf:
    """A voxel grid exposing the ``evaluate(x, grad)`` SDF interface."""

    def __init__(self, grid: VoxelGrid):
        self.grid = grid

    def evaluate(self, x, grad: bool = False):
        v, g = grid_sample(self.grid, x)
        return (v, g) if grad else v


# ----------------------------------------------------------- serialization

_GRID_MAGIC = b"SKVG"
_GRID_HEADER = struct.Struct("<4sII3dd")  # magic, version, resolution, center, half_extent


def save_grid(path, grid: VoxelGrid) -> None:
    """Little-endian header followed by float32 values, x fastest."""
    c = grid.cube
    head = _GRID_HEADER.pack(_GRID_MAGIC, 1, grid.resolution, *c.center, c.half_extent)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n, cx, cy, cz, half = _GRID_HEADER.unpack_from(raw, 0)
    if magic != _GRID_MAGIC or version != 1:
        raise ValueError(f"{path}: not a voxel grid file")
    vals = np.frombuffer(raw, dtype="<f4", count=n ** 3, offset=_GRID_HEADER.size)
    layout = GridLayout(n, BoundingCube((cx, cy, cz), half))
    return VoxelGrid(layout, vals.reshape((n, n, n), order="F").astype(np.float64))
