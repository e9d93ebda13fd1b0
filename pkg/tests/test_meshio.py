import numpy as np
import pytest

from skullcarve.geometry import PointSet, TriangleMesh
from skullcarve.meshio import load_scan, read_obj, read_ply, write_obj, write_ply
from skullcarve.primitives import icosphere


def test_obj_round_trip(tmp_path):
    m = icosphere(2, radius=10.0)
    p = tmp_path / "m.obj"
    write_obj(p, m)
    r = read_obj(p)
    assert np.array_equal(r.triangles, m.triangles)
    assert np.allclose(r.vertices, m.vertices, atol=1e-6)


def test_obj_fan_triangulation_and_degenerates(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\nf 1 1 2\n")
    m = read_obj(p)
    assert m.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_ply_round_trip(tmp_path):
    m = icosphere(2, radius=10.0)
    p = tmp_path / "m.ply"
    write_ply(p, m)
    r = load_scan(p)
    assert isinstance(r, TriangleMesh)
    assert np.array_equal(r.triangles, m.triangles)
    assert np.allclose(r.vertices, m.vertices, atol=1e-5)


def test_ply_point_cloud(tmp_path):
    pts = np.arange(12, dtype="<f4").reshape(4, 3)
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 4\n" \
             "property float x\nproperty float y\nproperty float z\nend_header\n"
    p = tmp_path / "pc.ply"
    p.write_bytes(header.encode() + pts.tobytes())
    r = read_ply(p)
    assert isinstance(r, PointSet)
    assert np.allclose(r.points, pts)


def test_load_scan_rejects_unknown(tmp_path):
    with pytest.raises(ValueError):
        load_scan(tmp_path / "x.stl")
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        read_ply(bad)
