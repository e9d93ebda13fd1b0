"""Closed test meshes and analytic SDFs."""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Outward-oriented geodesic sphere with ``20 * 4**subdivisions`` triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = np.array(f, dtype=np.int64)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new, dtype=np.int64)
    V = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(V, faces)


def unit_cube_mesh() -> TriangleMesh:
    """The cube [0, 1]^3 with outward-facing triangles."""
    V = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
    F = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [2, 3, 7], [2, 7, 6], [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3]])
    return TriangleMesh(V, F)


def sphere_sdf(x, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.linalg.norm(np.asarray(x) - np.asarray(center), axis=-1) - radius


class SphereSdf:
    """Analytic sphere with the ``evaluate(x, grad)`` SDF interface."""

    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def evaluate(self, x, grad: bool = False):
        d = np.asarray(x, dtype=np.float64) - self.center
        r = np.linalg.norm(d, axis=-1)
        if not grad:
            return r - self.radius
        g = d / np.where(r > 0, r, 1.0)[..., None]
        return r - self.radius, g
