"""Canonical-frame calibration: landmark triangulation, similarity fitting, and
re-expressing cameras and camera-space normal maps in the canonical frame."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, pixel_ray
from .errors import DegenerateError, ParameterError
from .raster import Frame, NormalMap

log = logging.getLogger(__name__)


@dataclass
class SimilarityTransform:
    """``x -> s * R @ x + t``."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rms: float | None = None
    residuals: dict | None = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not self.s > 0:
            raise ParameterError("similarity scale must be positive")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-8 or np.linalg.det(self.R) <= 0:
            raise ParameterError("similarity R must be a proper rotation")

    def apply(self, points) -> np.ndarray:
        return self.s * np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform(1.0 / self.s, self.R.T, -(self.R.T @ self.t) / self.s)

    def to_dict(self) -> dict:
        out = {"s": float(self.s), "R": [float(x) for x in self.R.reshape(-1)], "t": [float(x) for x in self.t]}
        if self.rms is not None:
            out["rms"] = float(self.rms)
        if self.residuals:
            out["residuals"] = {k: float(v) for k, v in self.residuals.items()}
        return out

    @classmethod
    def from_dict(cls, d) -> "SimilarityTransform":
        try:
            return cls(float(d["s"]), np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"malformed transform record: {exc}") from exc


def triangulate(rays) -> np.ndarray:
    """Least-squares closest point to a bundle of ``(origin, direction)`` rays."""
    rays = list(rays)
    if len(rays) < 2:
        raise DegenerateError(f"need at least 2 rays, got {len(rays)}")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for origin, direction in rays:
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ np.asarray(origin, dtype=np.float64)
    eig = np.linalg.eigvalsh(A)
    cond = eig[-1] / eig[0] if eig[0] > 0 else np.inf
    if eig[0] <= 1e-9:
        raise DegenerateError(f"near-parallel ray bundle (condition number {cond:.3g})", condition=cond)
    return np.linalg.solve(A, b)


def fit_similarity(X, Y) -> SimilarityTransform:
    """Procrustes fit of the similarity mapping points ``X`` onto ``Y``.

    Rotation from the SVD of the cross-covariance with the reflection removed,
    scale as the square root of the variance ratio, translation from centroids.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1, 3)
    if len(X) != len(Y) or len(X) < 3:
        raise ParameterError("need matching point sets with at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    for name, pts in (("X", Xc), ("Y", Yc)):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateError(f"{name} points are collinear or coincident", condition=np.inf)
    U, _, Vt = np.linalg.svd(Xc.T @ Yc)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    s = np.sqrt(np.sum(Yc ** 2) / np.sum(Xc ** 2))
    t = my - s * R @ mx
    resid = np.linalg.norm(s * X @ R.T + t - Y, axis=1)
    return SimilarityTransform(s, R, t, rms=float(np.sqrt(np.mean(resid ** 2))))


def canonical_camera(cam: Camera, G: SimilarityTransform) -> Camera:
    """Camera that sees ``G(x)`` exactly where ``cam`` sees ``x``. Depths scale by ``G.s``."""
    R = cam.R @ G.R.T
    T = G.s * cam.T - R @ G.t
    # re-orthonormalize against round-off
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return cam.replace(R=R, T=T, near=cam.near * G.s, far=cam.far * G.s)


def canonicalize(cams, normals, G: SimilarityTransform):
    """Express cameras and camera-space normal maps in the canonical frame."""
    cams = list(cams)
    normals = list(normals)
    if len(cams) != len(normals):
        raise ParameterError(f"{len(cams)} cameras but {len(normals)} normal maps")
    out_cams, out_maps = [], []
    for cam, nmap in zip(cams, normals):
        if nmap.frame is not Frame.CAMERA:
            raise ParameterError("canonicalize expects camera-space normal maps")
        cc = canonical_camera(cam, G)
        rotated = nmap.normals @ cc.R  # rows: R*^T n
        rotated[~nmap.valid] = 0.0
        out_cams.append(cc)
        out_maps.append(NormalMap(rotated, nmap.valid.copy(), Frame.CANONICAL))
    return out_cams, out_maps


def to_camera_space(nmap: NormalMap, cam: Camera) -> NormalMap:
    if nmap.frame is Frame.CAMERA:
        return nmap
    n = nmap.normals @ cam.R.T
    n[~nmap.valid] = 0.0
    return NormalMap(n, nmap.valid.copy(), Frame.CAMERA)


# landmarks: {view_index: [(landmark_id, u, v), ...]}
LandmarkSet2D = dict


def calibrate_session(cams, landmarks2d: LandmarkSet2D, template3d: dict) -> SimilarityTransform:
    """Triangulate landmarks seen in >= 2 views and fit them to the template."""
    cams = list(cams)
    rays: dict[str, list] = {}
    for view, points in landmarks2d.items():
        if not 0 <= view < len(cams):
            raise ParameterError(f"landmark view {view} has no camera")
        seen = set()
        for lid, u, v in points:
            if lid in seen:
                raise ParameterError(f"landmark {lid!r} repeated in view {view}")
            seen.add(lid)
            rays.setdefault(lid, []).append(pixel_ray(cams[view], u, v))
    ids, X = [], []
    for lid in sorted(rays):
        if lid not in template3d:
            continue
        if len(rays[lid]) < 2:
            log.warning("landmark %s observed in %d view(s); excluded", lid, len(rays[lid]))
            continue
        try:
            X.append(triangulate(rays[lid]))
        except DegenerateError as exc:
            log.warning("landmark %s excluded: %s", lid, exc)
            continue
        ids.append(lid)
    if len(ids) < 3:
        raise DegenerateError(f"only {len(ids)} usable landmarks shared with the template; need 3")
    Y = np.array([template3d[i] for i in ids], dtype=np.float64)
    G = fit_similarity(np.array(X), Y)
    resid = np.linalg.norm(G.apply(np.array(X)) - Y, axis=1)
    G.residuals = dict(zip(ids, resid.tolist()))
    return G


def load_landmarks(path) -> LandmarkSet2D:
    data = json.loads(Path(path).read_text())
    try:
        return {
            int(view["view"]): [(str(p["id"]), float(p["u"]), float(p["v"])) for p in view["points"]]
            for view in data["views"]
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"{path}: malformed landmarks file: {exc}") from exc


def save_landmarks(path, landmarks: LandmarkSet2D) -> None:
    views = [
        {"view": int(view), "points": [{"id": lid, "u": float(u), "v": float(v)} for lid, u, v in pts]}
        for view, pts in sorted(landmarks.items())
    ]
    Path(path).write_text(json.dumps({"views": views}, indent=1))


def load_template(path) -> dict:
    data = json.loads(Path(path).read_text())
    try:
        return {str(p["id"]): np.asarray(p["xyz"], dtype=np.float64).reshape(3) for p in data["points"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"{path}: malformed template file: {exc}") from exc


def save_template(path, template: dict) -> None:
    pts = [{"id": k, "xyz": [float(x) for x in v]} for k, v in sorted(template.items())]
    Path(path).write_text(json.dumps({"points": pts}, indent=1))


def load_transform(path) -> SimilarityTransform:
    return SimilarityTransform.from_dict(json.loads(Path(path).read_text()))


def save_transform(path, G: SimilarityTransform) -> None:
    Path(path).write_text(json.dumps(G.to_dict(), indent=1))
