from collections import Counter

import numpy as np
import pytest

from skullcarve.geometry import BoundingCube, GridLayout
from skullcarve.isosurface import EmptyHull, ScalarField, extract, interpolate_on_edges, vertex_grads


def sphere_field(n=24, r=7.3, half=10.0, center=(0.3, -0.2, 0.1)):
    lay = GridLayout(n, BoundingCube((0, 0, 0), half))
    return lay, ScalarField(lay, np.linalg.norm(lay.points() - np.asarray(center), axis=-1) - r)


def smooth_field(rng, n=12):
    lay = GridLayout(n, BoundingCube((0, 0, 0), 1.0))
    X = lay.points()
    v = np.linalg.norm(X, axis=-1) - 0.6
    for _ in range(4):
        k = rng.normal(size=3) * 3
        v += 0.05 * np.sin(X @ k + rng.uniform(0, 6))
    return lay, ScalarField(lay, v)


def test_sphere_vertices_near_surface():
    lay, f = sphere_field()
    m = extract(f)
    r = np.linalg.norm(m.vertices - np.array([0.3, -0.2, 0.1]), axis=1)
    assert np.max(np.abs(r - 7.3)) < 0.3 * lay.spacing


def test_midpoint_vertex():
    lay = GridLayout(2, BoundingCube((0, 0, 0), 1.0))
    vals = np.ones(lay.shape)
    vals[0, 0, 0] = -1.0
    m = extract(ScalarField(lay, vals))
    assert len(m) == 3
    P = lay.points()
    for (a, b), v in zip(m.parent_edges, m.vertices):
        pa, pb = P.reshape(-1, 3)[a], P.reshape(-1, 3)[b]
        assert np.allclose(v, 0.5 * (pa + pb))


def test_empty_hull():
    lay = GridLayout(4, BoundingCube((0, 0, 0), 1.0))
    with pytest.raises(EmptyHull):
        extract(ScalarField(lay, np.ones(lay.shape)))
    with pytest.raises(ValueError):
        ScalarField(lay, np.full(lay.shape, np.nan))


def test_vertices_on_straddling_edges_with_zero_interpolant(rng):
    lay, f = smooth_field(rng)
    m = extract(f)
    sv = f.values.reshape(-1)
    assert np.all(np.sign(sv[m.parent_edges[:, 0]]) != np.sign(sv[m.parent_edges[:, 1]]))
    assert np.max(np.abs(interpolate_on_edges(m, f))) < 1e-9
    assert m.triangles.min() >= 0 and m.triangles.max() < len(m)


def test_watertight_on_closed_surface():
    _, f = sphere_field()
    m = extract(f)
    edges = Counter()
    for a, b, c in m.triangles:
        for e in ((a, b), (b, c), (c, a)):
            edges[tuple(sorted(e))] += 1
    assert set(edges.values()) == {2}


def test_outward_orientation():
    _, f = sphere_field()
    m = extract(f)
    v = m.vertices[m.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    c = v.mean(axis=1) - np.array([0.3, -0.2, 0.1])
    assert np.all(np.einsum("ij,ij->i", n, c) > 0)


def test_single_edge_gradient_example():
    """Both endpoint derivatives equal -h/4 along the edge for s_a=-1, s_b=+1."""
    lay = GridLayout(2, BoundingCube((0, 0, 0), 1.0))
    vals = np.ones(lay.shape)
    vals[0, 0, 0] = -1.0
    f = ScalarField(lay, vals)
    m = extract(f)
    h = lay.spacing
    k = [i for i, (a, b) in enumerate(m.parent_edges) if b == np.ravel_multi_index((1, 0, 0), lay.shape)][0]
    up = np.zeros((len(m), 3))
    up[k] = [1.0, 0.0, 0.0]
    g = vertex_grads(m, up, f)
    ga, gb = g[0, 0, 0], g[1, 0, 0]
    assert np.isclose(ga, -h / 4) and np.isclose(gb, -h / 4)
    eps = 1e-6
    for idx, an in (((0, 0, 0), ga), ((1, 0, 0), gb)):
        vp, vm = vals.copy(), vals.copy()
        vp[idx] += eps
        vm[idx] -= eps
        fd = (extract(ScalarField(lay, vp)).vertices[k, 0] - extract(ScalarField(lay, vm)).vertices[k, 0]) / (2 * eps)
        assert abs(fd - an) / abs(fd) < 1e-6


def test_zero_upstream_and_locality(rng):
    lay, f = smooth_field(rng)
    m = extract(f)
    assert np.all(vertex_grads(m, np.zeros((len(m), 3))) == 0)
    g = vertex_grads(m, rng.normal(size=(len(m), 3)))
    on_edge = np.zeros(lay.resolution ** 3, bool)
    on_edge[m.parent_edges.reshape(-1)] = True
    assert np.all(g.reshape(-1)[~on_edge] == 0)


def test_directional_finite_differences(rng):
    lay, f = smooth_field(rng)
    m = extract(f)
    up = rng.normal(size=(len(m), 3))
    g = vertex_grads(m, up, f)
    for _ in range(5):
        dirn = rng.normal(size=lay.shape)
        # largest step that keeps every sign
        eps = 1e-4 * np.min(np.abs(f.values)) / np.max(np.abs(dirn))
        vp = extract(ScalarField(lay, f.values + eps * dirn)).vertices
        vm = extract(ScalarField(lay, f.values - eps * dirn)).vertices
        fd = np.sum(up * (vp - vm)) / (2 * eps)
        an = np.sum(g * dirn)
        assert abs(fd - an) / abs(fd) < 1e-5


def test_masked_points_get_zero_gradient(rng):
    lay, f = smooth_field(rng)
    mask = rng.random(lay.shape) < 0.5
    fm = ScalarField(lay, f.values, mask)
    m = extract(fm)
    g = vertex_grads(m, rng.normal(size=(len(m), 3)), fm)
    assert np.all(g[~mask] == 0)
    assert np.any(g[mask] != 0)


def test_mismatched_field_rejected(rng):
    lay, f = smooth_field(rng)
    m = extract(f)
    with pytest.raises(ValueError):
        vertex_grads(m, np.zeros((len(m) + 1, 3)))
    with pytest.raises(ValueError):
        vertex_grads(m, np.zeros((len(m), 3)), ScalarField(lay, f.values + 1e-3))
