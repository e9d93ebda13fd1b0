"""OBJ and binary little-endian PLY mesh reading/writing."""

from __future__ import annotations

import os

import numpy as np

from .geometry import PointSet, TriangleMesh


def _fan(face):
    return [(face[0], face[i], face[i + 1]) for i in range(1, len(face) - 1)]


def read_obj(path) -> TriangleMesh:
    verts, tris = [], []
    with open(path, "r") as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(v) for v in line.split()[1:4]])
            elif line.startswith("f "):
                idx = []
                for tok in line.split()[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                tris.extend(_fan(idx))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3)).cleaned()


def write_obj(path, mesh, fmt: str = "%.6f") -> None:
    v = np.asarray(mesh.vertices)
    t = np.asarray(getattr(mesh, "triangles", np.zeros((0, 3), dtype=np.int64)))
    with open(path, "w") as fh:
        np.savetxt(fh, v, fmt=f"v {fmt} {fmt} {fmt}")
        if len(t):
            np.savetxt(fh, t + 1, fmt="f %d %d %d")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Binary little-endian PLY; returns a TriangleMesh, or a PointSet without faces."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        elements, fmt = [], None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported")
        data = fh.read()

    off = 0
    verts, tris = None, []
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        # list properties: walk records one by one
        for _ in range(count):
            for p in props:
                if p[0] == "list":
                    ct, it = np.dtype("<" + _PLY_TYPES[p[1]]), np.dtype("<" + _PLY_TYPES[p[2]])
                    k = int(np.frombuffer(data, ct, 1, off)[0])
                    off += ct.itemsize
                    vals = np.frombuffer(data, it, k, off).astype(np.int64)
                    off += it.itemsize * k
                    if name == "face" and p[3] in ("vertex_indices", "vertex_index"):
                        tris.extend(_fan(list(vals)))
                else:
                    off += np.dtype(_PLY_TYPES[p[0]]).itemsize
    if verts is None:
        raise ValueError(f"{path}: no vertex element")
    if not tris:
        return PointSet(verts)
    return TriangleMesh(verts, np.array(tris, dtype=np.int64)).cleaned()


def write_ply(path, mesh) -> None:
    v = np.asarray(mesh.vertices, dtype="<f4")
    t = np.asarray(mesh.triangles, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(t)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    faces = np.empty(len(t), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = t
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(faces.tobytes())


def load_scan(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format: {path}")
