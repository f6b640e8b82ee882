import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from normrecon.camera import CameraSamplerConfig, sample_cameras
from normrecon.errors import NoOverlapError, ParameterError
from normrecon.loss import LossConfig, frontal_weight, make_views, normal_loss, pixel_weights, total_loss
from normrecon.mesh import laplacian_loss, make_icosphere
from normrecon.raster import Frame, NormalMap, render_normals

from conftest import random_rotation, reference_normal_image


def small_cameras(seed, count, size=64):
    intr = dict(fx=float(size), fy=float(size), cx=size / 2, cy=size / 2, width=size, height=size)
    return sample_cameras(CameraSamplerConfig(seed=seed, intrinsics=intr), count)


def canonical_targets(mesh, cams):
    return [render_normals(mesh, c, Frame.CANONICAL)[0] for c in cams]


def random_unit_map(rng, shape, frame=Frame.CANONICAL, p_valid=0.8):
    n = rng.normal(size=shape + (3,))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return NormalMap(n, rng.random(shape) < p_valid, frame)


# ---------------------------------------------------------------- weights


def test_weight_endpoints_and_midpoint():
    assert frontal_weight(1.0, 2.5) == pytest.approx(1.0, abs=1e-15)
    assert frontal_weight(0.0, 2.5) == 0.0
    assert frontal_weight(-0.7, 2.5) == 0.0
    expected = (np.exp(1.25) - 1) / (np.exp(2.5) - 1)
    assert frontal_weight(0.5, 2.5) == pytest.approx(expected, rel=1e-14)
    assert frontal_weight(0.5, 2.5) == pytest.approx(0.2227, abs=1e-4)


@given(st.floats(0.01, 20.0), st.floats(-1.0, 2.0), st.floats(-1.0, 2.0))
def test_weight_is_monotone_and_bounded(alpha, a, b):
    lo, hi = min(a, b), max(a, b)
    wl, wh = frontal_weight(lo, alpha), frontal_weight(hi, alpha)
    assert 0.0 <= wl <= wh <= 1.0


def test_pixel_weights_on_sphere_match_per_pixel_dot(front_camera):
    nmap, _, _ = render_normals(make_icosphere(4), front_camera, Frame.CANONICAL)
    w = pixel_weights(nmap, front_camera, 2.5)
    # toward-camera vector per pixel, computed directly from the camera center
    ys, xs = np.nonzero(nmap.valid)
    rays = np.stack([(xs + 0.5 - 256) / 512, (ys + 0.5 - 256) / 512, np.ones_like(xs, float)], 1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    x = np.clip(np.sum(nmap.normals[ys, xs] * -rays, axis=1), 0, 1)
    assert np.abs(w[ys, xs] - np.expm1(2.5 * x) / np.expm1(2.5)).max() < 1e-12
    assert not w[~nmap.valid].any()
    assert w[256, 256] > 0.99


def test_pixel_weights_are_frame_agnostic(small_bumpy):
    cam = small_cameras(3, 1)[0]
    a = render_normals(small_bumpy, cam, Frame.CAMERA)[0]
    b = render_normals(small_bumpy, cam, Frame.CANONICAL)[0]
    assert np.abs(pixel_weights(a, cam) - pixel_weights(b, cam)).max() < 1e-12


# ---------------------------------------------------------------- normal loss


def test_perfect_match_is_zero(rng):
    t = random_unit_map(rng, (8, 8))
    w = rng.random((8, 8))
    value, _ = normal_loss([t], [t], [w])
    assert abs(value) < 1e-12


def test_flipped_targets_give_two(rng):
    t = random_unit_map(rng, (8, 8))
    flipped = NormalMap(-t.normals, t.valid, t.frame)
    value, _ = normal_loss([t], [flipped], [rng.random((8, 8))])
    assert value == pytest.approx(2.0, abs=1e-12)


def test_normal_loss_gradient_matches_finite_differences(rng):
    r = [random_unit_map(rng, (6, 5)) for _ in range(2)]
    t = [random_unit_map(rng, (6, 5)) for _ in range(2)]
    w = [rng.random((6, 5)) for _ in range(2)]
    for normalize in (True, False):
        _, grads = normal_loss(r, t, w, normalize)
        h = 1e-6
        for view in range(2):
            for _ in range(15):
                y, x, c = rng.integers(6), rng.integers(5), rng.integers(3)
                plus = [NormalMap(m.normals.copy(), m.valid, m.frame) for m in r]
                minus = [NormalMap(m.normals.copy(), m.valid, m.frame) for m in r]
                plus[view].normals[y, x, c] += h
                minus[view].normals[y, x, c] -= h
                fd = (normal_loss(plus, t, w, normalize)[0] - normal_loss(minus, t, w, normalize)[0]) / (2 * h)
                assert abs(fd - grads[view][y, x, c]) <= 1e-6 * max(abs(fd), 1e-3)


@given(st.integers(0, 10_000))
def test_normalized_loss_is_in_range(seed):
    rng = np.random.default_rng(seed)
    r, t = random_unit_map(rng, (5, 5)), random_unit_map(rng, (5, 5))
    r.valid[0, 0] = t.valid[0, 0] = True
    value, _ = normal_loss([r], [t], [rng.random((5, 5)) + 1e-3])
    assert -1e-12 <= value <= 2 + 1e-12


def test_literal_mode_is_per_view_mean_over_m(rng):
    r = [random_unit_map(rng, (4, 4)) for _ in range(3)]
    t = [random_unit_map(rng, (4, 4)) for _ in range(3)]
    w = [rng.random((4, 4)) for _ in range(3)]
    value, _ = normal_loss(r, t, w, normalize_weights=False)
    expected = 1.0
    for a, b, ww in zip(r, t, w):
        both = a.valid & b.valid
        expected -= np.sum(ww[both] * np.sum(a.normals[both] * b.normals[both], -1)) / both.sum() / 3
    assert value == pytest.approx(expected, rel=1e-12)


def test_no_overlap_and_mismatch_errors(rng):
    a = random_unit_map(rng, (4, 4))
    b = NormalMap(a.normals, ~a.valid, a.frame)
    with pytest.raises(NoOverlapError):
        normal_loss([a], [b], [np.ones((4, 4))])
    with pytest.raises(ParameterError):
        normal_loss([a], [NormalMap(a.normals, a.valid, Frame.CAMERA)], [np.ones((4, 4))])
    with pytest.raises(ParameterError):
        normal_loss([], [], [])


def test_config_validation():
    with pytest.raises(ParameterError):
        LossConfig(lambda_lap=-1)
    with pytest.raises(ParameterError):
        LossConfig(alpha=0)


# ---------------------------------------------------------------- total loss


def test_perfect_targets_without_smoothing_give_zero():
    mesh = make_icosphere(3)
    cams = small_cameras(0, 3)
    views = make_views(cams, canonical_targets(mesh, cams))
    value, grad = total_loss(mesh, views, LossConfig(lambda_lap=0.0))
    assert abs(value) < 1e-12
    assert np.abs(grad).max() < 1e-9


@pytest.mark.parametrize("relative", [False, True])
def test_total_is_normal_plus_weighted_laplacian(relative):
    mesh = make_icosphere(3)
    cams = small_cameras(0, 3)
    views = make_views(cams, canonical_targets(mesh, cams))
    cfg = LossConfig(lambda_lap=0.1, relative_laplacian=relative)
    value, _, parts = total_loss(mesh, views, cfg, return_parts=True)
    assert abs(parts["normal"]) < 1e-12
    assert value == 0.1 * laplacian_loss(mesh, relative=relative)[0] + parts["normal"]


def frozen_total(mesh, views, caches, cfg):
    rendered = [NormalMap(reference_normal_image(mesh, v.camera, c), c.valid, Frame.CANONICAL)
                for v, c in zip(views, caches)]
    value, _ = normal_loss(rendered, [v.target for v in views], [v.weights for v in views], cfg.normalize_weights)
    return value + cfg.lambda_lap * laplacian_loss(mesh, relative=cfg.relative_laplacian)[0]


def test_total_gradient_matches_finite_differences(small_bumpy):
    rng = np.random.default_rng(21)
    mesh = make_icosphere(3)
    mesh = mesh.with_vertices(mesh.vertices * 1.02 + rng.normal(0, 0.005, mesh.vertices.shape))
    cams = small_cameras(4, 3, size=96)
    views = make_views(cams, canonical_targets(small_bumpy, cams))
    cfg = LossConfig(lambda_lap=0.1)
    _, grad, parts = total_loss(mesh, views, cfg, return_parts=True)
    caches = parts["caches"]
    seen = np.unique(np.concatenate([mesh.faces[c.face_index[c.valid]].ravel() for c in caches]))
    picks = rng.choice(len(seen) * 3, 100, replace=False)
    h, good = 1e-6, 0
    for idx in picks:
        i, k = seen[idx // 3], idx % 3
        xp, xm = mesh.vertices.copy(), mesh.vertices.copy()
        xp[i, k] += h
        xm[i, k] -= h
        fd = (frozen_total(mesh.with_vertices(xp), views, caches, cfg)
              - frozen_total(mesh.with_vertices(xm), views, caches, cfg)) / (2 * h)
        good += abs(fd - grad[i, k]) <= 1e-3 * max(abs(fd), 1e-7)
    assert good >= 95


def test_threads_do_not_change_the_result(small_bumpy):
    mesh = make_icosphere(3)
    cams = small_cameras(2, 4)
    views = make_views(cams, canonical_targets(small_bumpy, cams))
    a = total_loss(mesh, views, threads=1)
    b = total_loss(mesh, views, threads=3)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


@given(st.integers(0, 10_000))
def test_total_loss_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = make_icosphere(2)
    truth = truth.with_vertices(truth.vertices * (1 + 0.05 * rng.random((len(truth.vertices), 1))))
    mesh = make_icosphere(2)
    cams = small_cameras(seed, 2)
    targets = canonical_targets(truth, cams)
    Q = random_rotation(rng)
    value, grad = total_loss(mesh, make_views(cams, targets))
    rot_cams = [c.replace(R=c.R @ Q.T) for c in cams]
    rot_targets = [NormalMap(t.normals @ Q.T, t.valid, t.frame) for t in targets]
    rot_value, rot_grad = total_loss(mesh.with_vertices(mesh.vertices @ Q.T), make_views(rot_cams, rot_targets))
    assert abs(rot_value - value) < 1e-9
    assert np.abs(rot_grad - grad @ Q.T).max() < 1e-9
