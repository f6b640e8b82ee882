"""Indexed triangle meshes: construction, normals, Laplacian and auditing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ParameterError

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12


@dataclass(frozen=True)
class TriMesh:
    """Vertices ``(V, 3)`` float64 and counter-clockwise faces ``(F, 3)`` int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new positions; cached topology is shared."""
        out = TriMesh(vertices, self.faces)
        if "topology" in self.__dict__:
            out.__dict__["topology"] = self.__dict__["topology"]
        return out

    @cached_property
    def topology(self):
        """``edge_face_counts(faces)``, computed once per connectivity."""
        return edge_face_counts(self.faces)

    def edges(self) -> np.ndarray:
        return self.topology[0]


@dataclass
class MeshAudit:
    is_manifold: bool
    degenerate_face_count: int
    boundary_edge_count: int
    min_edge_length: float
    max_edge_length: float
    euler_characteristic: int = 0
    issues: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.is_manifold and self.degenerate_face_count == 0

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "is_manifold": self.is_manifold,
            "degenerate_face_count": self.degenerate_face_count,
            "boundary_edge_count": self.boundary_edge_count,
            "min_edge_length": self.min_edge_length,
            "max_edge_length": self.max_edge_length,
            "euler_characteristic": self.euler_characteristic,
            "issues": list(self.issues),
        }


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted ``(E, 2)`` array of undirected edges, lower index first."""
    return edge_face_counts(faces)[0]


def edge_face_counts(faces: np.ndarray):
    """Unique edges, per-edge face counts and the inverse map from half-edges.

    Half-edges are ordered face-major: half-edge ``3*f + k`` runs from
    ``faces[f, k]`` to ``faces[f, (k+1) % 3]``.
    """
    he = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    lo, hi = he.min(axis=1), he.max(axis=1)
    base = int(he.max()) + 1 if len(he) else 1
    key, inverse, counts = np.unique(lo * base + hi, return_inverse=True, return_counts=True)
    edges = np.stack([key // base, key % base], axis=1)
    return edges, counts, inverse.reshape(-1), he


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals ``(v1 - v0) x (v2 - v0)`` (twice the area)."""
    v0 = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)


def face_areas(vertices, faces) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(vertices, faces), axis=1)


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Icosahedron refined ``subdivisions`` times, projected onto a sphere."""
    if not (0 <= int(subdivisions) <= 8) or int(subdivisions) != subdivisions:
        raise ParameterError(f"subdivisions must be an integer in [0, 8], got {subdivisions}")
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(int(subdivisions)):
        edges, _, inverse, _ = edge_face_counts(faces)
        mid = verts[edges[:, 0]] + verts[edges[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = (inverse + len(verts)).reshape(-1, 3)  # midpoint of edges (01, 12, 20)
        a, b, c = faces.T
        ab, bc, ca = m.T
        faces = np.concatenate(
            [
                np.stack([a, ab, ca], 1),
                np.stack([ab, b, bc], 1),
                np.stack([ca, bc, c], 1),
                np.stack([ab, bc, ca], 1),
            ]
        )
        verts = np.concatenate([verts, mid])
    verts = verts * float(radius) + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, faces)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Unit vertex normals from summed unnormalized face cross products."""
    return _vertex_normals(mesh.vertices, mesh.faces)[0]


def _accumulate(faces: np.ndarray, per_face: np.ndarray, n_vertices: int) -> np.ndarray:
    out = np.zeros((n_vertices, 3))
    idx = faces.reshape(-1)
    rep = np.repeat(per_face, 3, axis=0)
    for k in range(3):
        out[:, k] = np.bincount(idx, weights=rep[:, k], minlength=n_vertices)
    return out


def _vertex_normals(vertices, faces):
    """Return ``(normals, accumulated, face_cross)``; the latter two feed the backward pass."""
    fc = face_cross(vertices, faces)
    acc = _accumulate(faces, fc, len(vertices))
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-300
    if bad.any():
        # pathological star: fall back to an incident face normal
        used = np.zeros(len(vertices), dtype=bool)
        used[faces.reshape(-1)] = True
        fallback_ids = np.nonzero(bad & used)[0]
        if len(fallback_ids):
            log.warning("zero accumulated normal at %d vertices; using incident face normal", len(fallback_ids))
            first_face = np.full(len(vertices), -1)
            first_face[faces[::-1].reshape(-1)] = np.repeat(np.arange(len(faces))[::-1], 3)
            acc[fallback_ids] = fc[first_face[fallback_ids]]
            norm = np.linalg.norm(acc, axis=1)
        acc[norm <= 1e-300] = (0.0, 0.0, 1.0)
        norm = np.linalg.norm(acc, axis=1)
    return acc / norm[:, None], acc, fc


def vertex_normals_backward(vertices, faces, grad_normals, cache=None) -> np.ndarray:
    """Chain ``dL/d(vertex normal)`` back to ``dL/d(vertex position)``."""
    if cache is None:
        cache = _vertex_normals(vertices, faces)
    n, acc, _ = cache
    length = np.linalg.norm(acc, axis=1)
    g = grad_normals
    g_acc = (g - np.sum(g * n, axis=1, keepdims=True) * n) / length[:, None]
    g_fc = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    v0 = vertices[faces[:, 0]]
    a = vertices[faces[:, 1]] - v0
    b = vertices[faces[:, 2]] - v0
    g1 = np.cross(b, g_fc)
    g2 = np.cross(g_fc, a)
    g0 = -g1 - g2
    per_corner = np.stack([g0, g1, g2], axis=1)  # F,3,3
    out = np.zeros_like(vertices)
    idx = faces.reshape(-1)
    flat = per_corner.reshape(-1, 3)
    for k in range(3):
        out[:, k] = np.bincount(idx, weights=flat[:, k], minlength=len(vertices))
    return out


def neighbor_lists(mesh: TriMesh):
    """CSR-style 1-ring: ``(offsets, neighbors)`` with neighbors sorted per vertex."""
    edges = mesh.edges()
    return _csr(edges, mesh.n_vertices)


def _csr(edges, n_vertices):
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=n_vertices)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, both[:, 1]


def valences(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    edges = unique_edges(faces)
    return np.bincount(edges.reshape(-1), minlength=n_vertices)


def uniform_laplacian(mesh: TriMesh) -> np.ndarray:
    """Per-vertex ``mean(1-ring) - position``; isolated vertices get zero."""
    return _laplacian(mesh.vertices, mesh.edges())


def _laplacian(vertices, edges):
    n = len(vertices)
    deg = np.bincount(edges.reshape(-1), minlength=n).astype(np.float64)
    s = np.zeros((n, 3))
    for k in range(3):
        s[:, k] = np.bincount(edges[:, 0], weights=vertices[edges[:, 1], k], minlength=n)
        s[:, k] += np.bincount(edges[:, 1], weights=vertices[edges[:, 0], k], minlength=n)
    isolated = deg == 0
    if isolated.any():
        log.warning("%d isolated vertices in Laplacian", int(isolated.sum()))
    deg[isolated] = 1.0
    lap = s / deg[:, None] - vertices
    lap[isolated] = 0.0
    return lap


def laplacian_loss(mesh: TriMesh, relative: bool = False):
    """Mean squared Laplacian magnitude and its gradient w.r.t. vertices.

    With ``relative`` the value is divided by the mean squared edge length, which
    makes it dimensionless and invariant to uniform scaling of the mesh.
    """
    vertices = mesh.vertices
    edges = mesh.edges()
    n = len(vertices)
    lap = _laplacian(vertices, edges)
    loss = float(np.mean(np.sum(lap * lap, axis=1)))
    # d/dx of mean |L x|^2 is (2/n) L^T L x with L = D^-1 A - I
    deg = np.bincount(edges.reshape(-1), minlength=n).astype(np.float64)
    isolated = deg == 0
    deg[isolated] = 1.0
    g = 2.0 / n * lap
    scaled = g / deg[:, None]
    scaled[isolated] = 0.0
    grad = -g
    for k in range(3):
        grad[:, k] += np.bincount(edges[:, 1], weights=scaled[edges[:, 0], k], minlength=n)
        grad[:, k] += np.bincount(edges[:, 0], weights=scaled[edges[:, 1], k], minlength=n)
    if relative:
        e = vertices[edges[:, 0]] - vertices[edges[:, 1]]
        msq = float(np.mean(np.sum(e * e, axis=1)))
        if msq <= 0:
            raise ValueError("mesh has zero mean edge length")
        ge = (2.0 / len(edges)) * e
        gm = np.zeros_like(vertices)
        for k in range(3):
            gm[:, k] = np.bincount(edges[:, 0], weights=ge[:, k], minlength=n)
            gm[:, k] -= np.bincount(edges[:, 1], weights=ge[:, k], minlength=n)
        grad = grad / msq - (loss / msq ** 2) * gm
        loss = loss / msq
    return loss, grad


def audit(mesh: TriMesh) -> MeshAudit:
    """Report invariant violations; never raises."""
    v, f = mesh.vertices, mesh.faces
    issues: list[str] = []
    if len(f) == 0:
        return MeshAudit(True, 0, 0, 0.0, 0.0, len(v), ["empty mesh"])
    in_range = bool(np.all((f >= 0) & (f < len(v))))
    if not in_range:
        issues.append("face index out of range")
        f = f[np.all((f >= 0) & (f < len(v)), axis=1)]
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
    areas = face_areas(v, f)
    degenerate = repeated | ~(areas > MIN_FACE_AREA)
    if repeated.any():
        issues.append(f"{int(repeated.sum())} faces repeat a vertex")

    edges, counts, inverse, he = mesh.topology if in_range else edge_face_counts(f)
    nonmanifold = int(np.sum(counts > 2))
    if nonmanifold:
        issues.append(f"{nonmanifold} edges shared by more than 2 faces")
    # consistent orientation: an interior edge must be traversed once each way
    forward = (he[:, 0] < he[:, 1]).astype(np.int64)
    fwd_count = np.bincount(inverse, weights=forward, minlength=len(edges))
    bad_orient = int(np.sum((counts == 2) & (fwd_count != 1)))
    if bad_orient:
        issues.append(f"{bad_orient} edges with inconsistent winding")
    lengths = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    euler = len(np.unique(f)) - len(edges) + len(f)
    return MeshAudit(
        is_manifold=in_range and nonmanifold == 0 and bad_orient == 0 and not repeated.any(),
        degenerate_face_count=int(degenerate.sum()),
        boundary_edge_count=int(np.sum(counts == 1)),
        min_edge_length=float(lengths.min()),
        max_edge_length=float(lengths.max()),
        euler_characteristic=int(euler),
        issues=issues,
    )
