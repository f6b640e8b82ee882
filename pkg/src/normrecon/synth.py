"""Synthetic ground truth: bumpy spheres, GT renders, a predictor-error noise model and
landmark fixtures for exercising calibration."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_points
from .errors import ParameterError
from .mesh import TriMesh, audit, make_icosphere, vertex_normals
from .raster import DepthMap, Frame, NormalMap, render_normals


class Base(str, enum.Enum):
    SPHERE = "sphere"
    BUMPY = "bumpy"
    BLOB = "blob"


@dataclass(frozen=True)
class SyntheticSubject:
    base: Base = Base.BUMPY
    bump_amplitude: float = 0.05
    bump_frequency: float = 4.0
    seed: int = 0
    subdivisions: int = 5

    def __post_init__(self):
        object.__setattr__(self, "base", Base(self.base))
        if not 0.0 <= self.bump_amplitude <= 0.3:
            raise ParameterError("bump_amplitude must lie in [0, 0.3]")
        if not self.bump_frequency > 0:
            raise ParameterError("bump_frequency must be positive")


@dataclass(frozen=True)
class NoiseModel:
    angular_sigma: float = 0.0
    bias_axis: tuple | None = None
    bias_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.angular_sigma < 0:
            raise ParameterError("angular_sigma must be >= 0")


def value_noise(points: np.ndarray, frequency: float, seed: int) -> np.ndarray:
    """Smooth seeded lattice noise in [-1, 1] evaluated at 3D points."""
    rng = np.random.default_rng(seed)
    n = int(np.ceil(2 * frequency)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(n, n, n))
    g = (np.asarray(points) + 1.0) * frequency  # [-1,1] -> [0, 2f]
    g = np.clip(g, 0.0, n - 1 - 1e-9)
    i = np.floor(g).astype(np.int64)
    f = g - i
    s = f * f * (3.0 - 2.0 * f)  # smoothstep
    out = np.zeros(len(g))
    for dx in (0, 1):
        wx = s[:, 0] if dx else 1 - s[:, 0]
        for dy in (0, 1):
            wy = s[:, 1] if dy else 1 - s[:, 1]
            for dz in (0, 1):
                wz = s[:, 2] if dz else 1 - s[:, 2]
                out += wx * wy * wz * lattice[i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz]
    return out


def make_subject(s: SyntheticSubject) -> TriMesh:
    """Icosphere displaced radially by ``amplitude * noise``."""
    sphere = make_icosphere(s.subdivisions, 1.0)
    if s.base is Base.SPHERE or s.bump_amplitude == 0:
        return sphere
    p = sphere.vertices
    if s.base is Base.BUMPY:
        d = value_noise(p, s.bump_frequency, s.seed)
    else:
        # low-frequency blob plus a little detail
        d = 0.7 * value_noise(p, 1.0, s.seed) + 0.3 * value_noise(p, s.bump_frequency, s.seed + 1)
    n = vertex_normals(sphere)
    mesh = TriMesh(p + (s.bump_amplitude * d)[:, None] * n, sphere.faces)
    report = audit(mesh)
    if not report.ok:
        raise ParameterError(f"subject failed audit: {report.issues}")
    return mesh


def render_ground_truth(mesh: TriMesh, cams) -> list[tuple[NormalMap, DepthMap, np.ndarray]]:
    out = []
    for cam in cams:
        nmap, dmap, cache = render_normals(mesh, cam, Frame.CAMERA)
        out.append((nmap, dmap, cache.valid.copy()))
    return out


def _rotate(v, axis, angle):
    """Rodrigues rotation of row vectors ``v`` about unit row ``axis`` (perpendicular to v)."""
    c, s = np.cos(angle)[..., None], np.sin(angle)[..., None]
    return v * c + np.cross(axis, v) * s + axis * np.sum(axis * v, -1, keepdims=True) * (1 - c)


def _tangent(n, ref):
    t = np.cross(ref, n)
    bad = np.linalg.norm(t, axis=-1) < 1e-9
    if bad.any():
        t[bad] = np.cross(np.array([0.0, 1.0, 0.0]), n[bad])
        still = np.linalg.norm(t, axis=-1) < 1e-9
        t[still] = np.cross(np.array([1.0, 0.0, 0.0]), n[still])
    return t / np.linalg.norm(t, axis=-1, keepdims=True)


def perturb(normals: NormalMap, nm: NoiseModel) -> NormalMap:
    """Tilt each valid normal by a half-normal angle in a random tangent direction,
    then by ``bias_deg`` toward ``bias_axis`` (default +x)."""
    out = normals.normals.copy()
    mask = normals.valid
    n = out[mask]
    if nm.angular_sigma > 0 and len(n):
        rng = np.random.default_rng(nm.seed)
        angle = np.abs(rng.normal(0.0, np.radians(nm.angular_sigma), size=len(n)))
        phi = rng.uniform(0.0, 2 * np.pi, size=len(n))
        t1 = _tangent(n, np.array([0.0, 0.0, 1.0]))
        t2 = np.cross(n, t1)
        axis = np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2
        n = _rotate(n, axis, angle)
    if nm.bias_deg:
        ref = np.asarray(nm.bias_axis if nm.bias_axis is not None else (1.0, 0.0, 0.0), dtype=np.float64)
        ref = ref / np.linalg.norm(ref)
        axis = _tangent(n, ref)  # rotating about ref x n tilts n toward ref
        n = _rotate(n, -axis, np.full(len(n), np.radians(nm.bias_deg)))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    out[mask] = n
    return NormalMap(out, mask.copy(), normals.frame)


def template_landmarks(mesh: TriMesh, count: int = 16, seed: int = 0) -> dict:
    """Named surface points spread over the front (+z) half of the subject."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count * 4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d[d[:, 2] > 0.2][:count]
    v = mesh.vertices
    idx = np.argmax(d @ (v / np.linalg.norm(v, axis=1, keepdims=True)).T, axis=1)
    return {f"lm{i:02d}": v[j].copy() for i, j in enumerate(idx)}


def observe_landmarks(points: dict, cams, depth_maps=None, tol: float = 0.02) -> dict:
    """Pixel projections of 3D landmarks, keeping those inside the image and unoccluded."""
    out = {}
    ids = sorted(points)
    P = np.array([points[i] for i in ids])
    for view, cam in enumerate(cams):
        uvz = project_points(cam, P)
        pts = []
        for lid, (u, v, z) in zip(ids, uvz):
            if z <= cam.near or not (0 <= u < cam.width and 0 <= v < cam.height):
                continue
            if depth_maps is not None:
                dm = depth_maps[view]
                r, c = int(v), int(u)
                if not dm.valid[r, c] or abs(dm.depth[r, c] - z) > tol * z:
                    continue
            pts.append((lid, float(u), float(v)))
        out[view] = pts
    return out


def capture_frame_cameras(cams, G) -> list[Camera]:
    """Cameras in a capture frame related to the canonical one by ``G`` (canonical = G(capture))."""
    from .calibrate import canonical_camera

    return [canonical_camera(c, G.inverse()) for c in cams]


def random_similarity(seed: int):
    from .calibrate import SimilarityTransform

    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return SimilarityTransform(float(rng.uniform(0.5, 2.0)), R, rng.uniform(-1, 1, size=3))
