import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from normrecon.camera import Camera, CameraSamplerConfig, sample_cameras
from normrecon.errors import CacheInvalidError
from normrecon.mesh import TriMesh, make_icosphere
from normrecon.raster import (
    Frame,
    backward_normals,
    rasterize,
    render_depth,
    render_normals,
)

from conftest import random_rotation, reference_normal_image, small_camera


def brute_force_coverage(mesh, cam):
    """Pixel centers inside any front-facing projected triangle."""
    pc = cam.to_camera(mesh.vertices)
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    xs, ys = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    covered = np.zeros((cam.height, cam.width), dtype=bool)
    for a, b, c in mesh.faces:
        normal = np.cross(pc[b] - pc[a], pc[c] - pc[a])
        if np.dot(normal, pc[a]) >= 0:  # back-facing
            continue
        (x0, y0), (x1, y1), (x2, y2) = uv[a], uv[b], uv[c]
        e0 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        e1 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        e2 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
        covered |= ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return covered


def ray_cast_depth(mesh, cam):
    """Camera-frame depth of the nearest ray-triangle hit per pixel (Moller-Trumbore)."""
    pc = cam.to_camera(mesh.vertices)
    tri = pc[mesh.faces]
    out = np.zeros((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            d = np.array([(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0])
            e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
            p = np.cross(d, e2)
            det = np.sum(e1 * p, axis=1)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            s = -tri[:, 0]
            u = np.sum(s * p, axis=1) * inv
            q = np.cross(s, e1)
            v = (q @ d) * inv
            t = np.sum(e2 * q, axis=1) * inv
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
            if hit.any():
                out[y, x] = t[hit].min()  # d has unit z, so t is the depth
    return out


# ---------------------------------------------------------------- forward


def test_sphere_center_pixel_normal_and_depth(front_camera):
    nmap, dmap, _ = render_normals(make_icosphere(4), front_camera, Frame.CAMERA)
    # analytic hit of the pixel-center ray with the unit sphere (half a pixel off axis)
    d = np.array([0.5 / 512, 0.5 / 512, 1.0])
    o = np.array([0.0, 0.0, -2.0])
    b = o @ d
    t = (-b - np.sqrt(b * b - (d @ d) * (o @ o - 1))) / (d @ d)
    hit = o + t * d
    assert np.allclose(nmap.normals[256, 256], hit, atol=1e-3)
    assert np.allclose(nmap.normals[256, 256], [0, 0, -1], atol=2e-3)
    assert dmap.depth[256, 256] == pytest.approx(1.0, abs=1e-3)


def test_plane_facing_camera_has_uniform_depth():
    cam = Camera(np.eye(3), np.zeros(3), 32.0, 32.0, 16.0, 16.0, 32, 32)
    plane = TriMesh([[-10, -10, 3], [10, -10, 3], [10, 10, 3], [-10, 10, 3]], [[0, 2, 1], [0, 3, 2]])
    d = render_depth(plane, cam)
    assert d.valid.all()
    assert np.abs(d.depth - 3.0).max() < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_coverage_matches_point_in_triangle_scan(small_bumpy, seed):
    rng = np.random.default_rng(seed)
    eye = rng.normal(size=3)
    cam = small_camera(2.5 * eye / np.linalg.norm(eye))
    cache = rasterize(small_bumpy, cam)
    assert np.array_equal(cache.valid, brute_force_coverage(small_bumpy, cam))


def test_depth_matches_ray_casting(small_bumpy):
    cam = small_camera([0.3, 0.4, 2.4], size=32, focal=40.0)
    d = render_depth(small_bumpy, cam)
    ref = ray_cast_depth(small_bumpy, cam)
    assert np.array_equal(d.valid, ref > 0)
    assert np.abs(d.depth[d.valid] - ref[d.valid]).max() < 1e-4


def test_camera_space_normals_face_the_camera(small_bumpy):
    for cam in sample_cameras(CameraSamplerConfig(seed=4), 3):
        nmap, _, _ = render_normals(small_bumpy, cam)
        assert np.all(nmap.normals[nmap.valid][:, 2] < 0)


def test_canonical_frame_is_rotated_camera_frame(small_bumpy):
    cam = sample_cameras(CameraSamplerConfig(seed=6), 1)[0]
    a, _, _ = render_normals(small_bumpy, cam, Frame.CAMERA)
    b, _, _ = render_normals(small_bumpy, cam, Frame.CANONICAL)
    assert np.array_equal(a.valid, b.valid)
    assert np.abs(b.normals[b.valid] @ cam.R.T - a.normals[a.valid]).max() < 1e-12


def test_shading_matches_numpy_reference(small_bumpy):
    cam = sample_cameras(CameraSamplerConfig(seed=8), 1)[0]
    nmap, _, cache = render_normals(small_bumpy, cam)
    assert np.abs(nmap.normals - reference_normal_image(small_bumpy, cam, cache)).max() < 1e-12


def test_forward_is_bitwise_deterministic(small_bumpy):
    cam = sample_cameras(CameraSamplerConfig(seed=9), 1)[0]
    a, da, _ = render_normals(small_bumpy, cam)
    b, db, _ = render_normals(small_bumpy, cam)
    assert np.array_equal(a.normals, b.normals) and np.array_equal(da.depth, db.depth)


@given(st.integers(0, 10_000))
def test_rigid_motion_of_scene_and_camera(seed):
    rng = np.random.default_rng(seed)
    mesh = make_icosphere(2)
    eye = rng.normal(size=3)
    cam = small_camera(3.0 * eye / np.linalg.norm(eye))
    Rg, tg = random_rotation(rng), rng.normal(size=3)
    moved_mesh = mesh.with_vertices(mesh.vertices @ Rg.T + tg)
    moved_cam = cam.replace(R=cam.R @ Rg.T, T=cam.T - cam.R @ Rg.T @ tg)
    a, da, _ = render_normals(mesh, cam)
    b, db, _ = render_normals(moved_mesh, moved_cam)
    # coverage can only differ where a pixel center lies on a triangle edge to rounding
    assert np.mean(a.valid != b.valid) < 1e-3
    both = a.valid & b.valid
    assert both.sum() > 100
    assert np.abs(a.normals[both] - b.normals[both]).max() < 1e-6
    assert np.abs(da.depth[both] - db.depth[both]).max() < 1e-6


def test_empty_coverage_gives_invalid_maps():
    cam = Camera(np.eye(3), np.array([0.0, 0.0, -5.0]), 32.0, 32.0, 16.0, 16.0, 32, 32)
    nmap, dmap, _ = render_normals(make_icosphere(1), cam)  # sphere behind the camera
    assert not nmap.valid.any() and not dmap.valid.any()


# ---------------------------------------------------------------- backward


def test_zero_image_gradient_gives_zero(small_bumpy, front_camera):
    _, _, cache = render_normals(small_bumpy, front_camera)
    g = backward_normals(small_bumpy, front_camera, cache, np.zeros(cache.bary.shape))
    assert not g.any()


def test_gradient_is_translation_free(small_bumpy, rng):
    cam = sample_cameras(CameraSamplerConfig(seed=1), 1)[0]
    _, _, cache = render_normals(small_bumpy, cam)
    g = backward_normals(small_bumpy, cam, cache, rng.normal(size=cache.bary.shape))
    # normals do not change under rigid translation, so the summed gradient vanishes
    assert np.abs(g.sum(axis=0)).max() < 1e-9 * np.abs(g).sum()


def test_stale_cache_is_rejected(small_bumpy, front_camera):
    _, _, cache = render_normals(make_icosphere(2), front_camera)
    with pytest.raises(CacheInvalidError):
        backward_normals(small_bumpy, front_camera, cache, np.zeros(cache.bary.shape))


@pytest.mark.parametrize("frame", [Frame.CAMERA, Frame.CANONICAL])
def test_backward_matches_finite_differences(small_bumpy, frame):
    rng = np.random.default_rng(5)
    cam = sample_cameras(CameraSamplerConfig(seed=2), 1)[0]
    cam = cam.replace(fx=128.0, fy=128.0, cx=64.0, cy=64.0, width=128, height=128)
    _, _, cache = render_normals(small_bumpy, cam, frame)
    G = rng.normal(size=cache.bary.shape)
    grad = backward_normals(small_bumpy, cam, cache, G)
    touched = np.unique(small_bumpy.faces[cache.face_index[cache.valid]])
    h = 1e-5
    good = 0
    picks = rng.choice(len(touched) * 3, 40, replace=False)
    for idx in picks:
        i, k = touched[idx // 3], idx % 3
        xp, xm = small_bumpy.vertices.copy(), small_bumpy.vertices.copy()
        xp[i, k] += h
        xm[i, k] -= h
        fp = np.sum(G * reference_normal_image(small_bumpy.with_vertices(xp), cam, cache))
        fm = np.sum(G * reference_normal_image(small_bumpy.with_vertices(xm), cam, cache))
        fd = (fp - fm) / (2 * h)
        good += abs(fd - grad[i, k]) <= 1e-3 * max(abs(fd), 1e-6)
    assert good >= 0.95 * len(picks)
