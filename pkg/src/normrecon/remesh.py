"""Edge split / collapse / flip operators that keep per-vertex optimizer state aligned.

Candidates are found with vectorized edge scans; the edits themselves run
sequentially on a small incidence structure (vertex -> face sets) so that
each operation sees the effect of the ones before it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RemeshCorruptionError
from .mesh import MIN_FACE_AREA, TriMesh, audit, edge_face_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemeshConfig:
    min_edge: float = 0.005
    max_edge: float = 0.06
    max_vertices: int = 500_000
    flip_enabled: bool = True

    def __post_init__(self):
        if not (0 < self.min_edge < self.max_edge):
            raise ParameterError("need 0 < min_edge < max_edge")
        if self.max_vertices < 4:
            raise ParameterError("max_vertices must be >= 4")


@dataclass
class OptimState:
    """Per-vertex first moment ``m`` (V,3), scalar second moment ``v`` (V,) and step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_vertices: int) -> "OptimState":
        return cls(np.zeros((n_vertices, 3)), np.zeros(n_vertices), 0)

    def __len__(self):
        return len(self.v)


@dataclass
class RemeshStats:
    splits: int = 0
    collapses: int = 0
    collapses_skipped: int = 0
    flips: int = 0
    budget_hits: int = 0

    def add(self, other: "RemeshStats") -> None:
        self.splits += other.splits
        self.collapses += other.collapses
        self.collapses_skipped += other.collapses_skipped
        self.flips += other.flips
        self.budget_hits += other.budget_hits


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


class _Editor:
    def __init__(self, mesh: TriMesh, state: OptimState | None):
        self.V = mesh.vertices.tolist()
        self.F = mesh.faces.tolist()
        self.n0 = mesh.n_vertices
        self.face_alive = [True] * len(self.F)
        self.vert_alive = [True] * len(self.V)
        # vertex -> incident faces, materialized lazily from a CSR table
        flat = mesh.faces.reshape(-1)
        order = np.argsort(flat, kind="stable")
        self._csr_faces = order // 3
        counts = np.bincount(flat, minlength=self.n0)
        self._csr_off = np.concatenate([[0], np.cumsum(counts)])
        self._vf = {}
        self.n_alive = int(np.count_nonzero(counts))
        self.dirty = False
        self.has_state = state is not None
        if state is not None:
            if len(state.v) != len(self.V):
                raise RemeshCorruptionError("optimizer state is not aligned with the mesh")
            self.m = state.m.tolist()
            self.v2 = state.v.tolist()
            self.t = state.t

    def vf(self, v):
        s = self._vf.get(v)
        if s is None:
            s = set(self._csr_faces[self._csr_off[v]:self._csr_off[v + 1]].tolist())
            self._vf[v] = s
        return s

    def current_faces(self, mesh: TriMesh) -> np.ndarray:
        if not self.dirty:
            return mesh.faces
        return np.array([f for f, ok in zip(self.F, self.face_alive) if ok], dtype=np.int64).reshape(-1, 3)

    # -- queries ---------------------------------------------------------
    def edge_faces(self, a, b):
        return self.vf(a) & self.vf(b)

    def neighbors(self, a):
        out = set()
        for f in self.vf(a):
            out.update(self.F[f])
        out.discard(a)
        return out

    def valence(self, a):
        return len(self.neighbors(a))

    def is_boundary_vertex(self, a):
        for b in self.neighbors(a):
            if len(self.edge_faces(a, b)) != 2:
                return True
        return False

    def length(self, a, b):
        d = _sub(self.V[a], self.V[b])
        return _dot(d, d) ** 0.5

    def normal(self, f, pos=None):
        a, b, c = self.F[f]
        P = self.V if pos is None else pos
        return _cross(_sub(P[b], P[a]), _sub(P[c], P[a]))

    @staticmethod
    def _rotate_to(face, a):
        """Face vertices rotated so ``a`` comes first."""
        i = face.index(a)
        return face[i:] + face[:i]

    # -- operators -------------------------------------------------------
    def split(self, a, b):
        faces = self.edge_faces(a, b)
        p = self.V[a]
        q = self.V[b]
        mid = ((p[0] + q[0]) / 2, (p[1] + q[1]) / 2, (p[2] + q[2]) / 2)
        m = len(self.V)
        self.V.append(mid)
        self.vert_alive.append(True)
        self._vf[m] = set()
        self.n_alive += 1
        self.dirty = True
        if self.has_state:
            ma, mb = self.m[a], self.m[b]
            self.m.append(((ma[0] + mb[0]) / 2, (ma[1] + mb[1]) / 2, (ma[2] + mb[2]) / 2))
            self.v2.append((self.v2[a] + self.v2[b]) / 2)
        for f in faces:
            face = self.F[f]
            # orient so the split edge runs x -> y
            x = a if self._rotate_to(face, a)[1] == b else b
            x, y, c = self._rotate_to(face, x)
            g = len(self.F)
            self.F[f] = [x, m, c]
            self.F.append([m, y, c])
            self.face_alive.append(True)
            self.vf(y).discard(f)
            self.vf(y).add(g)
            self.vf(c).add(g)
            self.vf(m).update((f, g))
        return m

    def try_collapse(self, a, b) -> bool:
        faces = self.edge_faces(a, b)
        if len(faces) != 2:
            return False
        if self.is_boundary_vertex(a) or self.is_boundary_vertex(b):
            return False
        na, nb = self.neighbors(a), self.neighbors(b)
        opposite = set()
        for f in faces:
            opposite.update(v for v in self.F[f] if v != a and v != b)
        # link condition
        if (na & nb) != opposite or len(opposite) != 2:
            return False
        for c in opposite:
            if self.valence(c) <= 3:
                return False
        if len(na) + len(nb) - 4 < 3:
            return False
        p, q = self.V[a], self.V[b]
        mid = ((p[0] + q[0]) / 2, (p[1] + q[1]) / 2, (p[2] + q[2]) / 2)
        affected = (self.vf(a) | self.vf(b)) - faces
        for f in affected:
            old = self.normal(f)
            pts = [mid if v in (a, b) else self.V[v] for v in self.F[f]]
            new = _cross(_sub(pts[1], pts[0]), _sub(pts[2], pts[0]))
            if _dot(new, new) ** 0.5 * 0.5 <= MIN_FACE_AREA or _dot(new, old) <= 0:
                return False
        # apply: a survives at the midpoint, b is retired
        self.V[a] = mid
        if self.has_state:
            ma, mb = self.m[a], self.m[b]
            self.m[a] = ((ma[0] + mb[0]) / 2, (ma[1] + mb[1]) / 2, (ma[2] + mb[2]) / 2)
            self.v2[a] = (self.v2[a] + self.v2[b]) / 2
        for f in faces:
            self.face_alive[f] = False
            for v in self.F[f]:
                self.vf(v).discard(f)
        for f in list(self.vf(b)):
            self.F[f] = [a if v == b else v for v in self.F[f]]
            self.vf(a).add(f)
        self._vf[b] = set()
        self.vert_alive[b] = False
        self.dirty = True
        self.n_alive -= 1
        return True

    def try_flip(self, a, b, min_edge: float = 0.0) -> bool:
        faces = self.edge_faces(a, b)
        if len(faces) != 2:
            return False
        f1, f2 = faces
        # orient: f1 holds a -> b
        if self._rotate_to(self.F[f1], a)[1] != b:
            f1, f2 = f2, f1
        c = self._rotate_to(self.F[f1], a)[2]
        d = self._rotate_to(self.F[f2], b)[2]
        if c == d or d in self.neighbors(c) or self.length(c, d) < min_edge:
            return False
        va, vb, vc, vd = self.valence(a), self.valence(b), self.valence(c), self.valence(d)
        before = (va - 6) ** 2 + (vb - 6) ** 2 + (vc - 6) ** 2 + (vd - 6) ** 2
        after = (va - 7) ** 2 + (vb - 7) ** 2 + (vc - 5) ** 2 + (vd - 5) ** 2
        if not after < before:
            return False
        new1, new2 = [a, d, c], [d, b, c]
        n_old = tuple(x + y for x, y in zip(self.normal(f1), self.normal(f2)))
        for face in (new1, new2):
            P = [self.V[v] for v in face]
            n = _cross(_sub(P[1], P[0]), _sub(P[2], P[0]))
            if _dot(n, n) ** 0.5 * 0.5 <= MIN_FACE_AREA or _dot(n, n_old) <= 0:
                return False
        self.F[f1] = new1
        self.F[f2] = new2
        self.vf(b).discard(f1)
        self.vf(a).discard(f2)
        self.vf(c).add(f2)
        self.vf(d).add(f1)
        self.dirty = True
        return True

    # -- export ----------------------------------------------------------
    def result(self):
        n = len(self.V)
        alive_v = np.zeros(n, dtype=bool)
        alive_v[: self.n0] = np.diff(self._csr_off) > 0
        for v, faces in self._vf.items():
            alive_v[v] = bool(faces)
        remap = np.cumsum(alive_v) - 1
        V = np.array(self.V, dtype=np.float64)[alive_v]
        F = np.array([f for f, ok in zip(self.F, self.face_alive) if ok], dtype=np.int64).reshape(-1, 3)
        mesh = TriMesh(V, remap[F])
        state = None
        if self.has_state:
            state = OptimState(
                np.array(self.m, dtype=np.float64).reshape(-1, 3)[alive_v],
                np.array(self.v2, dtype=np.float64)[alive_v],
                self.t,
            )
        return mesh, state


def _edge_table(mesh: TriMesh):
    edges, counts, _, _ = mesh.topology
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    return edges, counts, lengths


def _run_split(ed: _Editor, mesh: TriMesh, cfg: RemeshConfig, stats: RemeshStats):
    edges, counts, lengths = _edge_table(mesh)
    cand = np.nonzero((lengths > cfg.max_edge) & (counts == 2))[0]
    cand = cand[np.argsort(-lengths[cand], kind="stable")]
    for e in cand.tolist():
        if ed.n_alive >= cfg.max_vertices:
            stats.budget_hits += 1
            log.warning("vertex budget %d reached; remaining splits skipped", cfg.max_vertices)
            break
        a, b = int(edges[e, 0]), int(edges[e, 1])
        if len(ed.edge_faces(a, b)) != 2 or ed.length(a, b) <= cfg.max_edge:
            continue
        ed.split(a, b)
        stats.splits += 1


def _run_collapse(ed: _Editor, mesh: TriMesh, cfg: RemeshConfig, stats: RemeshStats):
    # scan the editor's current faces so edges created by splits are included
    if ed.dirty:
        faces = ed.current_faces(mesh)
        V = np.array(ed.V)
        edges = edge_face_counts(faces)[0]
    else:
        V = mesh.vertices
        edges = mesh.edges()
    if not len(edges):
        return
    lengths = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
    cand = np.nonzero(lengths < cfg.min_edge)[0]
    cand = cand[np.argsort(lengths[cand], kind="stable")]
    for e in cand.tolist():
        a, b = int(edges[e, 0]), int(edges[e, 1])
        if not (ed.vert_alive[a] and ed.vert_alive[b]):
            continue
        if not ed.edge_faces(a, b) or ed.length(a, b) >= cfg.min_edge:
            continue
        if ed.try_collapse(a, b):
            stats.collapses += 1
        else:
            stats.collapses_skipped += 1


def _run_flip(ed: _Editor, mesh: TriMesh, stats: RemeshStats, min_edge: float = 0.0):
    faces = ed.current_faces(mesh)
    if not len(faces):
        return
    edges, counts, inverse, he = edge_face_counts(faces) if ed.dirty else mesh.topology
    n = len(ed.V)
    val = np.bincount(edges.reshape(-1), minlength=n)
    # opposite vertex of each half-edge
    opp = np.roll(faces, -2, axis=1).reshape(-1)
    interior = np.nonzero(counts == 2)[0]
    # the two opposite vertices per interior edge
    order = np.argsort(inverse, kind="stable")
    first = np.searchsorted(inverse[order], interior)
    c = opp[order[first]]
    d = opp[order[first + 1]]
    a, b = edges[interior, 0], edges[interior, 1]
    before = (val[a] - 6) ** 2 + (val[b] - 6) ** 2 + (val[c] - 6) ** 2 + (val[d] - 6) ** 2
    after = (val[a] - 7) ** 2 + (val[b] - 7) ** 2 + (val[c] - 5) ** 2 + (val[d] - 5) ** 2
    cand = interior[after < before]
    for e in cand.tolist():
        a, b = int(edges[e, 0]), int(edges[e, 1])
        if ed.try_flip(a, b, min_edge):
            stats.flips += 1


def _finish(ed: _Editor, check: bool = True):
    mesh, state = ed.result()
    if check:
        report = audit(mesh)
        if not report.ok:
            raise RemeshCorruptionError(f"remeshing produced an invalid mesh: {report.issues}")
    return mesh, state


def split_long_edges(mesh: TriMesh, state: OptimState | None, cfg: RemeshConfig):
    """Split interior edges longer than ``max_edge`` at their midpoints, longest first."""
    ed = _Editor(mesh, state)
    stats = RemeshStats()
    _run_split(ed, mesh, cfg, stats)
    if not stats.splits:
        return mesh, state, 0
    m, s = _finish(ed)
    return m, s, stats.splits


def collapse_short_edges(mesh: TriMesh, state: OptimState | None, cfg: RemeshConfig):
    """Collapse edges shorter than ``min_edge`` to their midpoint when the link condition
    holds and no incident face turns over."""
    ed = _Editor(mesh, state)
    stats = RemeshStats()
    _run_collapse(ed, mesh, cfg, stats)
    if not stats.collapses:
        return mesh, state, 0
    m, s = _finish(ed)
    return m, s, stats.collapses


def flip_edges(mesh: TriMesh, cfg: RemeshConfig | None = None):
    """Flip interior edges whose flip strictly lowers the valence deviation from 6."""
    ed = _Editor(mesh, None)
    stats = RemeshStats()
    _run_flip(ed, mesh, stats, cfg.min_edge if cfg is not None else 0.0)
    if not stats.flips:
        return mesh, 0
    m, _ = _finish(ed)
    return m, stats.flips


def remesh_pass(mesh: TriMesh, state: OptimState | None, cfg: RemeshConfig, stats: RemeshStats | None = None):
    """Split, collapse, flip, then audit. State arrays are remapped alongside the vertices."""
    if state is not None and len(state.v) != mesh.n_vertices:
        raise RemeshCorruptionError("optimizer state is not aligned with the mesh")
    local = RemeshStats()
    edges, counts, lengths = _edge_table(mesh)
    interior = counts == 2
    need_split = bool(np.any((lengths > cfg.max_edge) & interior))
    need_collapse = bool(np.any(lengths < cfg.min_edge))
    ed = None
    if need_split or need_collapse or cfg.flip_enabled:
        ed = _Editor(mesh, state)
        if need_split:
            _run_split(ed, mesh, cfg, local)
        _run_collapse(ed, mesh, cfg, local)
        if cfg.flip_enabled:
            _run_flip(ed, mesh, local, cfg.min_edge)
    if stats is not None:
        stats.add(local)
    if ed is None or not (local.splits or local.collapses or local.flips):
        return mesh, state
    return _finish(ed)
