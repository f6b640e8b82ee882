"""Z-buffered software rasterizer for normal and depth maps, with an analytic backward pass.

Coverage and barycentric weights are treated as constants in the backward
pass: gradients reach the vertices only through the smooth vertex normals
and the renormalized interpolation, never through silhouette motion.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .errors import CacheInvalidError
from .mesh import TriMesh, _vertex_normals, vertex_normals_backward


class Frame(str, enum.Enum):
    CAMERA = "camera"
    CANONICAL = "canonical"


@dataclass
class NormalMap:
    normals: np.ndarray  # H,W,3
    valid: np.ndarray  # H,W bool
    frame: Frame = Frame.CAMERA

    def __post_init__(self):
        self.frame = Frame(self.frame)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals.shape != self.valid.shape + (3,):
            raise ValueError("normals and mask shapes disagree")

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]


@dataclass
class DepthMap:
    depth: np.ndarray  # H,W camera-frame z
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]


@dataclass
class RasterCache:
    face_index: np.ndarray  # H,W int32, -1 where uncovered
    bary: np.ndarray  # H,W,3 screen-space barycentrics
    depth: np.ndarray  # H,W
    n_vertices: int
    n_faces: int
    frame: Frame

    @property
    def valid(self) -> np.ndarray:
        return self.face_index >= 0


@numba.njit(cache=True, nogil=True)
def _rasterize_kernel(pc, faces, fx, fy, cx, cy, width, height, near, far):
    fid = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, z0 = pc[i0, 0], pc[i0, 1], pc[i0, 2]
        x1, y1, z1 = pc[i1, 0], pc[i1, 1], pc[i1, 2]
        x2, y2, z2 = pc[i2, 0], pc[i2, 1], pc[i2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        # back-face culling: the geometric normal must point toward the eye
        ax, ay, az = x1 - x0, y1 - y0, z1 - z0
        bx, by, bz = x2 - x0, y2 - y0, z2 - z0
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
        if nx * x0 + ny * y0 + nz * z0 >= 0.0:
            continue
        u0, v0 = fx * x0 / z0 + cx, fy * y0 / z0 + cy
        u1, v1 = fx * x1 / z1 + cx, fy * y1 / z1 + cy
        u2, v2 = fx * x2 / z2 + cx, fy * y2 / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        umin = min(u0, min(u1, u2))
        umax = max(u0, max(u1, u2))
        vmin = min(v0, min(v1, v2))
        vmax = max(v0, max(v1, v2))
        c0 = max(int(np.ceil(umin - 0.5)), 0)
        c1 = min(int(np.floor(umax - 0.5)), width - 1)
        r0 = max(int(np.ceil(vmin - 0.5)), 0)
        r1 = min(int(np.floor(vmax - 0.5)), height - 1)
        inv_area = 1.0 / area
        for r in range(r0, r1 + 1):
            pv = r + 0.5
            for c in range(c0, c1 + 1):
                pu = c + 0.5
                w0 = ((u1 - pu) * (v2 - pv) - (u2 - pu) * (v1 - pv)) * inv_area
                w1 = ((u2 - pu) * (v0 - pv) - (u0 - pu) * (v2 - pv)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if z <= near or z >= far or z >= zbuf[r, c]:
                    continue
                zbuf[r, c] = z
                fid[r, c] = f
                bary[r, c, 0] = w0
                bary[r, c, 1] = w1
                bary[r, c, 2] = w2
    return fid, bary, zbuf


@numba.njit(cache=True, nogil=True)
def _shade_kernel(fid, bary, faces, vn, rot):
    h, w = fid.shape
    out = np.zeros((h, w, 3))
    for r in range(h):
        for c in range(w):
            f = fid[r, c]
            if f < 0:
                continue
            sx = 0.0
            sy = 0.0
            sz = 0.0
            for k in range(3):
                b = bary[r, c, k]
                vi = faces[f, k]
                sx += b * vn[vi, 0]
                sy += b * vn[vi, 1]
                sz += b * vn[vi, 2]
            inv = 1.0 / np.sqrt(sx * sx + sy * sy + sz * sz)
            sx *= inv
            sy *= inv
            sz *= inv
            for k in range(3):
                out[r, c, k] = rot[k, 0] * sx + rot[k, 1] * sy + rot[k, 2] * sz
    return out


@numba.njit(cache=True, nogil=True)
def _backward_kernel(fid, bary, faces, vn, rot, grad, out):
    """Accumulate dL/d(vertex normal) into ``out`` for L = sum(grad * shaded)."""
    h, w = fid.shape
    for r in range(h):
        for c in range(w):
            f = fid[r, c]
            if f < 0:
                continue
            g0, g1, g2 = grad[r, c, 0], grad[r, c, 1], grad[r, c, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            # back to the world frame
            gx = rot[0, 0] * g0 + rot[1, 0] * g1 + rot[2, 0] * g2
            gy = rot[0, 1] * g0 + rot[1, 1] * g1 + rot[2, 1] * g2
            gz = rot[0, 2] * g0 + rot[1, 2] * g1 + rot[2, 2] * g2
            sx = 0.0
            sy = 0.0
            sz = 0.0
            for k in range(3):
                b = bary[r, c, k]
                vi = faces[f, k]
                sx += b * vn[vi, 0]
                sy += b * vn[vi, 1]
                sz += b * vn[vi, 2]
            length = np.sqrt(sx * sx + sy * sy + sz * sz)
            nx, ny, nz = sx / length, sy / length, sz / length
            d = gx * nx + gy * ny + gz * nz
            ux = (gx - d * nx) / length
            uy = (gy - d * ny) / length
            uz = (gz - d * nz) / length
            for k in range(3):
                b = bary[r, c, k]
                vi = faces[f, k]
                out[vi, 0] += b * ux
                out[vi, 1] += b * uy
                out[vi, 2] += b * uz


def rasterize(mesh: TriMesh, cam: Camera, frame=Frame.CAMERA) -> RasterCache:
    pc = cam.to_camera(mesh.vertices)
    fid, bary, zbuf = _rasterize_kernel(
        pc, mesh.faces, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
        int(cam.width), int(cam.height), float(cam.near), float(cam.far),
    )
    depth = np.where(fid >= 0, zbuf, 0.0)
    return RasterCache(fid, bary, depth, mesh.n_vertices, mesh.n_faces, Frame(frame))


def _frame_rotation(cam: Camera, frame: Frame) -> np.ndarray:
    return np.ascontiguousarray(cam.R) if Frame(frame) is Frame.CAMERA else np.eye(3)


def shade(cache: RasterCache, faces, vn, cam: Camera) -> NormalMap:
    """Normal image from a raster cache and precomputed unit vertex normals."""
    normals = _shade_kernel(cache.face_index, cache.bary, faces, vn, _frame_rotation(cam, cache.frame))
    return NormalMap(normals, cache.valid, cache.frame)


def render_normals(mesh: TriMesh, cam: Camera, frame=Frame.CAMERA):
    """Render ``(NormalMap, DepthMap, RasterCache)`` of ``mesh`` seen by ``cam``."""
    cache = rasterize(mesh, cam, frame)
    vn = _vertex_normals(mesh.vertices, mesh.faces)[0]
    nmap = shade(cache, mesh.faces, vn, cam)
    return nmap, DepthMap(cache.depth.copy(), cache.valid), cache


def render_depth(mesh: TriMesh, cam: Camera) -> DepthMap:
    cache = rasterize(mesh, cam)
    return DepthMap(cache.depth, cache.valid)


def check_cache(mesh: TriMesh, cache: RasterCache) -> None:
    if cache.n_vertices != mesh.n_vertices or cache.n_faces != mesh.n_faces:
        raise CacheInvalidError(
            f"raster cache built for {cache.n_vertices} vertices / {cache.n_faces} faces, "
            f"mesh has {mesh.n_vertices} / {mesh.n_faces}"
        )


def backward_to_vertex_normals(cache: RasterCache, faces, vn, cam: Camera, grad_image, out=None) -> np.ndarray:
    """Accumulate image gradients onto unit vertex normals (frozen coverage)."""
    if out is None:
        out = np.zeros_like(vn)
    grad = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad.shape != cache.bary.shape:
        raise ValueError(f"grad_image shape {grad.shape} does not match the render {cache.bary.shape}")
    _backward_kernel(cache.face_index, cache.bary, faces, vn, _frame_rotation(cam, cache.frame), grad, out)
    return out


def backward_normals(mesh: TriMesh, cam: Camera, cache: RasterCache, grad_image) -> np.ndarray:
    """Gradient w.r.t. vertex positions of ``sum(grad_image * rendered_normals)``."""
    check_cache(mesh, cache)
    vcache = _vertex_normals(mesh.vertices, mesh.faces)
    g_vn = backward_to_vertex_normals(cache, mesh.faces, vcache[0], cam, grad_image)
    return vertex_normals_backward(mesh.vertices, mesh.faces, g_vn, vcache)


def frozen_normal_image(mesh: TriMesh, cam: Camera, cache: RasterCache) -> np.ndarray:
    """Re-shade ``mesh`` through a fixed cache; the forward map the backward pass differentiates."""
    check_cache(mesh, cache)
    vn = _vertex_normals(mesh.vertices, mesh.faces)[0]
    return shade(cache, mesh.faces, vn, cam).normals
