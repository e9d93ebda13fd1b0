import numpy as np
import pytest

from conftest import random_pose, rel_err
from skullcarve.geometry import (BoundingCube, DualQuat, GridLayout, PointSet, TransformSet, TriangleMesh,
                                 VoxelGrid, bounding_cube, dq_apply, dq_compose, dq_from_matrix, dq_from_rt,
                                 dq_identity, dq_inverse, dq_normalize, dq_to_matrix, params_backward,
                                 params_to_rt, rigid_error)
from skullcarve.primitives import unit_cube_mesh


def test_bounding_cube_single_point_clamped():
    c = bounding_cube([PointSet([[0.0, 0.0, 0.0]])])
    assert c.center == (0.0, 0.0, 0.0)
    assert c.half_extent == 1.0


def test_bounding_cube_two_points():
    c = bounding_cube([PointSet([[-10.0, 0, 0], [10.0, 0, 0]])], padding=5)
    assert np.allclose(c.center, 0)
    assert c.half_extent == 15.0


def test_bounding_cube_unit_cube():
    c = bounding_cube([unit_cube_mesh()])
    assert np.allclose(c.center, 0.5)
    assert c.half_extent == 0.5


def test_bounding_cube_contains_inputs(rng):
    scans = [PointSet(rng.normal(size=(50, 3)) * 30) for _ in range(3)]
    c = bounding_cube(scans, padding=2)
    assert all(c.contains(s.points).all() for s in scans)


def test_bounding_cube_errors():
    with pytest.raises(ValueError):
        bounding_cube([])
    with pytest.raises(ValueError):
        bounding_cube([PointSet([[0.0, 0, 0]])], padding=-1)


def test_mesh_invariants():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriangleMesh([[np.nan, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 0, 1]]).cleaned()
    assert len(m.triangles) == 1
    with pytest.raises(ValueError):
        PointSet(np.zeros((0, 3)))


def test_layout_round_trip():
    lay = GridLayout(9, BoundingCube((1.0, -2.0, 3.0), 4.0))
    ijk = np.stack(np.meshgrid(*[np.arange(9)] * 3, indexing="ij"), -1).reshape(-1, 3)
    assert np.array_equal(lay.world_to_index(lay.index_to_world(ijk)), ijk)
    assert np.allclose(lay.points()[2, 3, 4], lay.index_to_world([2, 3, 4]))
    with pytest.raises(ValueError):
        GridLayout(1, BoundingCube((0, 0, 0), 1.0))
    with pytest.raises(ValueError):
        VoxelGrid(lay, np.full(lay.shape, np.inf))


def test_dq_from_rt_examples():
    assert dq_from_rt([1, 0, 0], 0.0, [0, 0, 0]) == dq_identity()
    assert np.allclose(dq_apply(dq_from_rt([1, 0, 0], 0.0, [1, 2, 3]), [0, 0, 0]), [1, 2, 3])
    assert np.allclose(dq_apply(dq_from_rt([0, 0, 1], np.pi / 2, [0, 0, 0]), [1, 0, 0]), [0, 1, 0], atol=1e-15)
    with pytest.raises(ValueError):
        dq_from_rt([0, 0, 0], 0.3, [0, 0, 0])


def test_dq_apply_examples(rng):
    x = rng.normal(size=(10, 3))
    assert np.array_equal(dq_apply(dq_identity(), x), x)
    assert np.allclose(dq_apply(dq_from_rt([0, 0, 1], 0.0, [1, 0, 0]), [0, 0, 0]), [1, 0, 0])
    qa, qb = random_pose(rng), random_pose(rng)
    assert np.allclose(dq_apply(dq_compose(qa, qb), x), dq_apply(qa, dq_apply(qb, x)), atol=1e-9)


def test_dq_apply_preserves_distances(rng):
    for _ in range(20):
        q = random_pose(rng, 180, 100)
        x, y = rng.normal(size=(2, 50, 3)) * 50
        d0 = np.linalg.norm(x - y, axis=1)
        d1 = np.linalg.norm(dq_apply(q, x) - dq_apply(q, y), axis=1)
        assert np.all(np.abs(d1 - d0) < 1e-9 * d0)


def test_composition_homomorphism(rng):
    for _ in range(20):
        qa, qb = random_pose(rng, 180, 50), random_pose(rng, 180, 50)
        assert np.allclose(dq_to_matrix(qa @ qb), dq_to_matrix(qa) @ dq_to_matrix(qb), atol=1e-9)


def test_normalize_examples(rng):
    q = random_pose(rng)
    n = dq_normalize(q)
    assert np.allclose(n.params(), q.params(), atol=1e-12)
    q2 = DualQuat.from_params(2 * q.params())
    x = rng.normal(size=(5, 3)) * 20
    assert np.allclose(dq_apply(q2, x), dq_apply(q, x), atol=1e-9)
    bad = DualQuat.from_params(rng.normal(size=8))
    nb = dq_normalize(bad)
    assert abs(np.linalg.norm(nb.real) - 1) < 1e-9
    assert abs(nb.real @ nb.dual) < 1e-9
    assert np.allclose(dq_normalize(nb).params(), nb.params(), atol=1e-12)
    with pytest.raises(ValueError):
        dq_normalize(DualQuat(np.zeros(4), np.ones(4)))


def test_dq_from_matrix_and_inverse(rng):
    q = random_pose(rng, 170, 30)
    M = dq_to_matrix(q)
    q2 = dq_from_matrix(M[:3, :3], M[:3, 3])
    assert rigid_error(q, q2)[0] < 1e-9 and rigid_error(q, q2)[1] < 1e-6
    x = rng.normal(size=(4, 3))
    assert np.allclose(dq_apply(dq_inverse(q), dq_apply(q, x)), x, atol=1e-9)


def test_rigid_error():
    t, a = rigid_error(dq_identity(), dq_from_rt([0, 1, 0], np.radians(3.0), [3, 4, 0]))
    assert np.isclose(t, 5.0) and np.isclose(a, 3.0)


def test_params_backward_matches_finite_differences(rng):
    for _ in range(5):
        p = rng.normal(size=8)
        GR, gt = rng.normal(size=(3, 3)), rng.normal(size=3)

        def f(z):
            R, t = params_to_rt(z)
            return float(np.sum(GR * R) + gt @ t)

        g = params_backward(p, GR, gt)
        h = 1e-6
        fd = np.array([(f(p + h * e) - f(p - h * e)) / (2 * h) for e in np.eye(8)])
        assert rel_err(g, fd) < 1e-6


def test_transform_set_first_is_identity(rng):
    with pytest.raises(ValueError):
        TransformSet((random_pose(rng),))
    ts = TransformSet.identity(3)
    with pytest.raises(ValueError):
        ts.replace(0, random_pose(rng))
    assert ts.replace(1, random_pose(rng))[0] == dq_identity()
