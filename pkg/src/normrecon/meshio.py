"""OBJ and binary PLY mesh I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError
from .mesh import TriMesh


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, mesh: TriMesh) -> None:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    rec = np.empty(mesh.n_faces, dtype=face_dtype)
    rec["n"] = 3
    rec["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(rec.tobytes())


def read_ply(path) -> TriMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParameterError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ParameterError(f"{path}: only binary little-endian PLY is supported")
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    verts = np.frombuffer(body, dtype="<f4", count=nv * 3).reshape(nv, 3)
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    rec = np.frombuffer(body, dtype=face_dtype, count=nf, offset=nv * 12)
    if nf and np.any(rec["n"] != 3):
        raise ParameterError(f"{path}: non-triangular faces")
    return TriMesh(verts.astype(np.float64), rec["idx"].astype(np.int64))


def read_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ParameterError(f"unsupported mesh format: {suffix}")


def write_mesh(path, mesh: TriMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".ply":
        write_ply(path, mesh)
    else:
        raise ParameterError(f"unsupported mesh format: {suffix}")
