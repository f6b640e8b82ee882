import numpy as np
import pytest

from normrecon.camera import CameraSamplerConfig, camera_from_params, look_at, sample_cameras
from normrecon.errors import DegenerateError, ParameterError
from normrecon.loss import LossConfig, make_views, total_loss
from normrecon.mesh import audit, make_icosphere
from normrecon.optimize import (
    ReconstructionConfig,
    ReconstructionFailed,
    adaptive_update,
    init_sphere_from_cameras,
    reconstruct,
    step,
    vertex_edge_length,
)
from normrecon.raster import Frame, NormalMap, render_normals
from normrecon.remesh import OptimState, RemeshConfig

from conftest import random_rotation

WIDE_BAND = RemeshConfig(min_edge=1e-4, max_edge=10.0, flip_enabled=False)


def small_cameras(seed, count, size=64):
    intr = dict(fx=float(size), fy=float(size), cx=size / 2, cy=size / 2, width=size, height=size)
    return sample_cameras(CameraSamplerConfig(seed=seed, intrinsics=intr), count)


def views_of(mesh, cams):
    return make_views(cams, [render_normals(mesh, c, Frame.CANONICAL)[0] for c in cams])


# ---------------------------------------------------------------- init


def test_ring_of_cameras_centers_at_origin():
    cams = [camera_from_params(0.0, yaw, np.zeros(3), 1.0) for yaw in np.linspace(-90, 90, 7)]
    m = init_sphere_from_cameras(cams, 2)
    assert np.abs(m.vertices.mean(axis=0)).max() < 1e-9
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 1).max() < 1e-9


def test_two_cameras_aimed_off_center():
    target = np.array([0.1, 0.0, 0.0])
    cams = [look_at([2.0, 0.0, -2.0], target), look_at([-1.5, 0.5, -2.0], target)]
    m = init_sphere_from_cameras(cams, 1)
    center = (m.vertices.max(0) + m.vertices.min(0)) / 2
    assert np.abs(center - target).max() < 1e-9


def test_jittered_bundle_matches_grid_search():
    cams = sample_cameras(CameraSamplerConfig(seed=4), 10)

    def cost(p):
        return sum(np.sum(np.cross(p - c.center, c.axis) ** 2) for c in cams)

    best, span = np.zeros(3), 1.0
    for _ in range(9):
        g = np.linspace(-span, span, 11)
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + best
        best = pts[np.argmin([cost(p) for p in pts])]
        span /= 4
    m = init_sphere_from_cameras(cams, 0)
    center = (m.vertices.max(0) + m.vertices.min(0)) / 2
    assert np.abs(center - best).max() < 1e-4


def test_single_camera_is_degenerate():
    with pytest.raises(DegenerateError):
        init_sphere_from_cameras(small_cameras(0, 1))


# ---------------------------------------------------------------- update


def test_zero_gradient_leaves_vertices_unchanged():
    m = make_icosphere(2)
    out, state = adaptive_update(m, OptimState.zeros(m.n_vertices), np.zeros((m.n_vertices, 3)),
                                 ReconstructionConfig())
    assert np.array_equal(out.vertices, m.vertices) and state.t == 1


def test_first_update_is_unit_step_along_gradient(rng):
    m = make_icosphere(2)
    g = rng.normal(size=(m.n_vertices, 3))
    cfg = ReconstructionConfig(learning_rate=0.3, eps=0.0)
    out, state = adaptive_update(m, OptimState.zeros(m.n_vertices), g, cfg)
    # with bias correction the first moment estimates equal g and the second equal |g|^2
    expected = m.vertices - 0.3 * vertex_edge_length(m)[:, None] * g / np.linalg.norm(g, axis=1, keepdims=True)
    assert np.abs(out.vertices - expected).max() < 1e-12
    assert np.allclose(state.m, 0.1 * g) and np.allclose(state.v, 0.001 * np.sum(g * g, 1))


def test_vertex_edge_length_on_icosahedron():
    m = make_icosphere(0)
    # circumradius 1 gives edge length 4 / sqrt(10 + 2 sqrt 5)
    assert np.allclose(vertex_edge_length(m), 4 / np.sqrt(10 + 2 * np.sqrt(5)), atol=1e-12)


def test_perfect_fit_step_barely_moves():
    m = make_icosphere(3)
    views = views_of(m, small_cameras(0, 3))
    cfg = ReconstructionConfig(loss=LossConfig(lambda_lap=0.0), remesh=WIDE_BAND)
    out, state, value = step(m, OptimState.zeros(m.n_vertices), views, cfg)
    assert abs(value) < 1e-12
    assert np.abs(out.vertices - m.vertices).max() < 1e-5


def test_single_step_decreases_loss_on_fixture():
    truth = make_icosphere(3)
    views = views_of(truth, small_cameras(3, 4, size=96))
    m = truth.with_vertices(truth.vertices * [1.25, 1.0, 0.85])
    cfg = ReconstructionConfig(learning_rate=0.1, remesh=WIDE_BAND)
    before = total_loss(m, views, cfg.loss)[0]
    out, state, value = step(m, OptimState.zeros(m.n_vertices), views, cfg)
    assert value == before
    assert total_loss(out, views, cfg.loss)[0] < before


def test_state_tracks_vertex_count_through_remesh():
    truth = make_icosphere(3)
    views = views_of(truth, small_cameras(1, 3))
    m = make_icosphere(2)
    state = OptimState.zeros(m.n_vertices)
    cfg = ReconstructionConfig(remesh=RemeshConfig(min_edge=0.05, max_edge=0.2))
    for i in range(3):
        m, state, _ = step(m, state, views, cfg, index=i)
        assert len(state) == m.n_vertices


# ---------------------------------------------------------------- reconstruct


def test_config_rejects_bad_values():
    with pytest.raises(ParameterError):
        ReconstructionConfig(steps=0)
    with pytest.raises(ParameterError):
        ReconstructionConfig(learning_rate=0.0)


def test_reconstruct_needs_two_views():
    views = views_of(make_icosphere(2), small_cameras(0, 1))
    with pytest.raises(ParameterError):
        reconstruct(views, ReconstructionConfig(steps=1))


def short_run(views, threads=1, steps=8):
    cfg = ReconstructionConfig(steps=steps, sphere_subdivisions=2, threads=threads,
                               remesh=RemeshConfig(min_edge=0.03, max_edge=0.25))
    return reconstruct(views, cfg)


def test_short_run_reduces_loss_and_stays_valid(small_bumpy):
    views = views_of(small_bumpy, small_cameras(2, 4))
    mesh, report = short_run(views, steps=15)
    assert len(report.losses) == 15 and np.all(np.isfinite(report.losses))
    assert min(report.losses[1:]) < report.losses[0]
    assert audit(mesh).ok and report.audit["ok"]
    assert report.n_vertices == mesh.n_vertices


def test_reconstruct_is_deterministic_and_thread_independent(small_bumpy):
    views = views_of(small_bumpy, small_cameras(5, 3))
    a, ra = short_run(views)
    b, rb = short_run(views)
    c, rc = short_run(views, threads=3)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    assert np.array_equal(a.vertices, c.vertices) and ra.losses == rc.losses


def test_reconstruct_is_rotation_equivariant(small_bumpy):
    """Rotating cameras, targets and the initial mesh together rotates the result
    (remeshing held fixed so the vertex order is comparable)."""
    rng = np.random.default_rng(8)
    cams = small_cameras(6, 3)
    targets = [render_normals(small_bumpy, c, Frame.CANONICAL)[0] for c in cams]
    Q = random_rotation(rng)
    init = init_sphere_from_cameras(cams, 2)
    cfg = ReconstructionConfig(steps=3, remesh=WIDE_BAND)
    a, _ = reconstruct(make_views(cams, targets), cfg, init_mesh=init)
    rot_cams = [c.replace(R=c.R @ Q.T) for c in cams]
    rot_targets = [NormalMap(t.normals @ Q.T, t.valid, t.frame) for t in targets]
    b, _ = reconstruct(make_views(rot_cams, rot_targets), cfg, init_mesh=init.with_vertices(init.vertices @ Q.T))
    assert np.array_equal(a.faces, b.faces)
    assert np.abs(b.vertices - a.vertices @ Q.T).max() < 1e-6


def test_non_finite_targets_abort_with_partial_mesh(small_bumpy):
    views = views_of(small_bumpy, small_cameras(0, 2))
    views[0].target.normals[views[0].target.valid] = np.nan
    with pytest.raises(ReconstructionFailed) as info:
        short_run(views, steps=3)
    assert info.value.step == 0 and info.value.mesh is not None
    assert info.value.report.error is not None
