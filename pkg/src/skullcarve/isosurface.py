"""Differentiable marching cubes on a cubic lattice.

Vertices sit on lattice edges ``(a, b)`` whose values straddle zero, at
``p_a + s_a / (s_a - s_b) * (p_b - p_a)``.  Their derivatives with respect to
``s_a`` and ``s_b`` are analytic; triangle connectivity is piecewise constant
and carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .geometry import GridLayout


class EmptyHull(RuntimeError):
    """The field has no zero crossing on the lattice."""


@dataclass(frozen=True, eq=False)
class ScalarField:
    layout: GridLayout
    values: np.ndarray
    active_mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(self.layout.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field must be finite")
        object.__setattr__(self, "values", v)
        m = np.ones(self.layout.shape, dtype=bool) if self.active_mask is None else \
            np.asarray(self.active_mask, dtype=bool).reshape(self.layout.shape)
        object.__setattr__(self, "active_mask", m)


@dataclass(frozen=True, eq=False)
class IsoMesh:
    vertices: np.ndarray      # (V, 3)
    triangles: np.ndarray     # (T, 3)
    parent_edges: np.ndarray  # (V, 2) flat lattice indices (a, b)
    t: np.ndarray             # (V,) interpolation parameter along a -> b
    edge_values: np.ndarray   # (V, 2) field values at (a, b)
    edge_active: np.ndarray   # (V, 2) active-mask flags at (a, b)
    layout: GridLayout

    def __len__(self):
        return len(self.vertices)


# local edge -> (axis, offset of its lower corner within the cell)
_EDGE_AXIS = np.empty(12, dtype=np.int64)
_EDGE_BASE = np.empty((12, 3), dtype=np.int64)
for _e, (_ca, _cb) in enumerate(EDGES):
    _d = CORNERS[_cb] - CORNERS[_ca]
    _EDGE_AXIS[_e] = int(np.flatnonzero(_d)[0])
    _EDGE_BASE[_e] = np.minimum(CORNERS[_ca], CORNERS[_cb])
_NTRI = (TRI_TABLE >= 0).sum(axis=1) // 3


def _interp_param(sa, sb):
    den = sa - sb
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, 0.5, sa / safe)


def extract(field: ScalarField) -> IsoMesh:
    """Zero isosurface (negative inside) with per-vertex parent edges."""
    layout = field.layout
    n = layout.resolution
    s = field.values
    neg = s < 0
    edge_vid = np.full((3, n, n, n), -1, dtype=np.int64)
    pa_list, pb_list = [], []
    count = 0
    flat = np.arange(n ** 3).reshape(n, n, n)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        cross = neg[tuple(lo)] != neg[tuple(hi)]
        idx = np.nonzero(cross)
        k = len(idx[0])
        sub = edge_vid[ax][tuple(lo)]
        sub[idx] = count + np.arange(k)
        edge_vid[ax][tuple(lo)] = sub
        pa_list.append(flat[tuple(lo)][idx])
        pb_list.append(flat[tuple(hi)][idx])
        count += k
    if count == 0:
        raise EmptyHull("field has no sign change")
    pa, pb = np.concatenate(pa_list), np.concatenate(pb_list)
    sv = s.reshape(-1)
    t = _interp_param(sv[pa], sv[pb])
    pts = layout.points().reshape(-1, 3)
    verts = pts[pa] + t[:, None] * (pts[pb] - pts[pa])

    # cells
    code = np.zeros((n - 1,) * 3, dtype=np.int64)
    for c, (di, dj, dk) in enumerate(CORNERS):
        code |= neg[di:di + n - 1, dj:dj + n - 1, dk:dk + n - 1].astype(np.int64) << c
    ci = np.nonzero((code != 0) & (code != 255))
    codes = code[ci]
    cells = np.stack(ci, axis=1)
    tris = []
    for slot in range(5):
        has = _NTRI[codes] > slot
        if not has.any():
            break
        cc, cl = codes[has], cells[has]
        tri = np.empty((len(cc), 3), dtype=np.int64)
        for v in range(3):
            e = TRI_TABLE[cc, 3 * slot + v]
            base = cl + _EDGE_BASE[e]
            tri[:, v] = edge_vid[_EDGE_AXIS[e], base[:, 0], base[:, 1], base[:, 2]]
        tris.append(tri)
    tri = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    # the table winds triangles clockwise seen from the negative side; flip to outward normals
    tri = tri[:, ::-1].copy()
    am = field.active_mask.reshape(-1)
    return IsoMesh(verts, tri, np.stack([pa, pb], axis=1), t,
                   np.stack([sv[pa], sv[pb]], axis=1), np.stack([am[pa], am[pb]], axis=1), layout)


def vertex_grads(mesh: IsoMesh, upstream, field: ScalarField | None = None) -> np.ndarray:
    """Pull per-vertex ``dL/dv`` back to lattice values (topology held fixed).

    Returns an array of ``layout.shape``; masked-out lattice points get zero.
    Passing ``field`` checks that the mesh was extracted from it.
    """
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)
    if len(up) != len(mesh.vertices):
        raise ValueError("upstream does not match the mesh vertex count")
    layout = mesh.layout
    pa, pb = mesh.parent_edges[:, 0], mesh.parent_edges[:, 1]
    if field is not None:
        sv = field.values.reshape(-1)
        if field.layout != layout or not (np.array_equal(sv[pa], mesh.edge_values[:, 0])
                                          and np.array_equal(sv[pb], mesh.edge_values[:, 1])):
            raise ValueError("mesh was not extracted from this field")
    sa, sb = mesh.edge_values[:, 0], mesh.edge_values[:, 1]
    den = sa - sb
    safe = np.where(den == 0, 1.0, den)
    dt_da = np.where(den == 0, 0.0, -sb / safe ** 2)
    dt_db = np.where(den == 0, 0.0, sa / safe ** 2)
    h = layout.spacing
    # parent edges are axis-aligned with length h, so p_b - p_a = h * e_axis
    axis = np.argmax(np.abs(_unravel(pb, layout) - _unravel(pa, layout)), axis=1)
    proj = h * up[np.arange(len(up)), axis]
    n3 = layout.resolution ** 3
    g = np.bincount(pa, weights=proj * dt_da * mesh.edge_active[:, 0], minlength=n3)
    g += np.bincount(pb, weights=proj * dt_db * mesh.edge_active[:, 1], minlength=n3)
    return g.reshape(layout.shape)


def _unravel(flat, layout):
    return np.stack(np.unravel_index(flat, layout.shape), axis=1)


def interpolate_on_edges(mesh: IsoMesh, field: ScalarField) -> np.ndarray:
    """Field linearly interpolated at each vertex along its parent edge."""
    sv = field.values.reshape(-1)
    sa, sb = sv[mesh.parent_edges[:, 0]], sv[mesh.parent_edges[:, 1]]
    return sa + mesh.t * (sb - sa)
