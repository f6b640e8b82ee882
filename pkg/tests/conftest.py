import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from normrecon.camera import Camera, look_at
from normrecon.raster import Frame
from normrecon.synth import SyntheticSubject, make_subject

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bumpy():
    return make_subject(SyntheticSubject(subdivisions=3))


@pytest.fixture
def front_camera():
    # camera at (0, 0, -2) looking at the origin: R = I, T = (0, 0, 2)
    return Camera(np.eye(3), np.array([0.0, 0.0, 2.0]), 512.0, 512.0, 256.0, 256.0, 512, 512)


def small_camera(eye, size=64, focal=64.0):
    return look_at(np.asarray(eye, float), np.zeros(3), np.array([0.0, 1.0, 0.0]),
                   fx=focal, fy=focal, cx=size / 2, cy=size / 2, width=size, height=size)


def reference_normal_image(mesh, cam, cache):
    """Independent numpy shading through a fixed cache (vertex normals by explicit face loop)."""
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    for tri in f:
        cr = np.cross(v[tri[1]] - v[tri[0]], v[tri[2]] - v[tri[0]])
        acc[tri] += cr
    vn = acc / np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros(cache.bary.shape)
    ys, xs = np.nonzero(cache.valid)
    tri = f[cache.face_index[ys, xs]]
    n = np.einsum("pk,pkc->pc", cache.bary[ys, xs], vn[tri])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    if cache.frame is Frame.CAMERA:
        n = n @ cam.R.T
    out[ys, xs] = n
    return out
