"""Pinhole cameras (world-to-camera R, T; +z forward; y-down image) and the random view sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, ParameterError

DEFAULT_SIZE = 512
DEFAULT_FOCAL = 512.0
DEFAULT_NEAR = 0.001
DEFAULT_FAR = 1000.0


@dataclass(frozen=True)
class Camera:
    R: np.ndarray
    T: np.ndarray
    fx: float = DEFAULT_FOCAL
    fy: float = DEFAULT_FOCAL
    cx: float = DEFAULT_SIZE / 2
    cy: float = DEFAULT_SIZE / 2
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        T = np.array(self.T, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise ParameterError("camera R must be a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    @property
    def axis(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.R[2].copy()

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.T

    def replace(self, **changes) -> "Camera":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "R": [float(x) for x in self.R.reshape(-1)],
            "T": [float(x) for x in self.T],
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                R=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                T=d["T"],
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
                near=float(d.get("near", DEFAULT_NEAR)), far=float(d.get("far", DEFAULT_FAR)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"malformed camera record: {exc}") from exc


def project(cam: Camera, p) -> tuple[float, float, float]:
    """Pixel coordinates and camera-frame depth of a single world point."""
    x, y, z = cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if z <= cam.near:
        raise BehindCameraError(f"point at depth {z:.6g} is not beyond the near plane {cam.near}")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def project_points(cam: Camera, points) -> np.ndarray:
    """Vectorized projection, ``(N, 3)`` -> ``(N, 3)`` of (u, v, depth). No clipping."""
    pc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    return np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy, z], axis=1)


def pixel_ray(cam: Camera, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise ParameterError(f"pixel ({u}, {v}) outside a {cam.width}x{cam.height} image")
    d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.center, cam.R.T @ (d / np.linalg.norm(d))


def pixel_directions(cam: Camera) -> np.ndarray:
    """World-frame unit ray directions through every pixel center, ``(H, W, 3)``."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    d = np.empty((cam.height, cam.width, 3))
    d[..., 0] = u[None, :]
    d[..., 1] = v[:, None]
    d[..., 2] = 1.0
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ cam.R


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), **intrinsics) -> Camera:
    """Camera at ``eye`` looking at ``target`` with world ``up`` appearing upward in the image."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(R=R, T=-R @ eye, **intrinsics)


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ParameterError(f"{path}: expected a JSON array of cameras")
    return [Camera.from_dict(d) for d in data]


@dataclass(frozen=True)
class CameraSamplerConfig:
    pitch_range: tuple[float, float] = (-35.0, 35.0)
    yaw_range: tuple[float, float] = (-90.0, 90.0)
    base_radius: float = 2.0
    translation_jitter: float = 0.2
    scale_range: tuple[float, float] = (1.0, 1.8)
    seed: int = 0
    intrinsics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pitch_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not np.isclose(lo, -hi):
                raise ParameterError(f"{name} must be a symmetric interval")
        if not self.base_radius > 0:
            raise ParameterError("base_radius must be positive")
        if self.translation_jitter < 0:
            raise ParameterError("translation_jitter must be non-negative")
        lo, hi = self.scale_range
        if lo < 1e-3 or hi < lo:
            raise ParameterError("scale_range must satisfy 1e-3 <= lo <= hi")


def _rot_x(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


# base view: camera on +z looking at the origin, image y pointing down world -y
_BASE_R = np.diag([1.0, -1.0, -1.0])


def sample_camera_params(cfg: CameraSamplerConfig, count: int) -> np.ndarray:
    """Draw ``(count, 6)`` rows of (pitch_deg, yaw_deg, tx, ty, tz, scale)."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    out = np.empty((count, 6))
    j = cfg.translation_jitter
    for i in range(count):
        out[i, 0] = rng.uniform(*cfg.pitch_range)
        out[i, 1] = rng.uniform(*cfg.yaw_range)
        out[i, 2:5] = rng.uniform(-j, j, size=3)
        out[i, 5] = rng.uniform(*cfg.scale_range)
    return out


def camera_from_params(pitch, yaw, jitter, scale, base_radius=2.0, **intrinsics) -> Camera:
    """Rotate the base view by yaw * pitch, add the jitter and divide the offset by ``scale``."""
    R = _BASE_R @ (_rot_y(yaw) @ _rot_x(pitch))
    T = (np.array([0.0, 0.0, base_radius]) + np.asarray(jitter, dtype=np.float64)) / scale
    return Camera(R=R, T=T, **intrinsics)


def sample_cameras(cfg: CameraSamplerConfig, count: int) -> list[Camera]:
    params = sample_camera_params(cfg, count)
    return [
        camera_from_params(p[0], p[1], p[2:5], p[5], cfg.base_radius, **cfg.intrinsics)
        for p in params
    ]
