"""Reconstruction loop: sphere initialization, per-vertex adaptive steps, remeshing."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibrate import triangulate
from .errors import DegenerateError, NumericalError, ParameterError
from .loss import LossConfig, total_loss
from .mesh import TriMesh, audit, make_icosphere
from .remesh import OptimState, RemeshConfig, RemeshStats, remesh_pass

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconstructionConfig:
    steps: int = 300
    learning_rate: float = 0.3
    loss: LossConfig = field(default_factory=LossConfig)
    remesh: RemeshConfig = field(default_factory=RemeshConfig)
    sphere_subdivisions: int = 3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError("steps must be an integer >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    losses: list[float] = field(default_factory=list)
    n_vertices: int = 0
    n_faces: int = 0
    wall_time: float = 0.0
    remesh: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class ReconstructionFailed(NumericalError):
    """Numerical failure mid-run; carries the partial mesh and report."""

    def __init__(self, message, step, mesh, report):
        super().__init__(message, step)
        self.mesh = mesh
        self.report = report


def init_sphere_from_cameras(cams, subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Icosphere centered on the least-squares meeting point of the optical axes."""
    cams = list(cams)
    if len(cams) < 2:
        raise DegenerateError("need at least two cameras to place the initial sphere")
    center = triangulate([(c.center, c.axis) for c in cams])
    return make_icosphere(subdivisions, radius, center)


def vertex_edge_length(mesh: TriMesh) -> np.ndarray:
    """Mean incident edge length per vertex."""
    edges = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    n = mesh.n_vertices
    total = np.bincount(edges.reshape(-1), weights=np.repeat(lengths, 2), minlength=n)
    count = np.bincount(edges.reshape(-1), minlength=n)
    return total / np.maximum(count, 1)


def adaptive_update(mesh: TriMesh, state: OptimState, grad: np.ndarray, cfg: ReconstructionConfig):
    """One bias-corrected moment update with a scalar (norm) second moment per vertex.

    The step is expressed in units of the local edge length, so the learning rate
    is resolution independent.
    """
    b1, b2 = cfg.betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * np.sum(grad * grad, axis=1)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    step = m_hat / (np.sqrt(v_hat) + cfg.eps)[:, None]
    scale = vertex_edge_length(mesh)[:, None]
    vertices = mesh.vertices - cfg.learning_rate * scale * step
    return mesh.with_vertices(vertices), OptimState(m, v, t)


def step(mesh: TriMesh, state: OptimState, views, cfg: ReconstructionConfig, stats: RemeshStats | None = None,
         index: int = 0):
    """Loss, gradient, vertex update and one remesh pass."""
    value, grad = total_loss(mesh, views, cfg.loss, threads=cfg.threads)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss or gradient at step {index}", step=index)
    updated, state = adaptive_update(mesh, state, grad, cfg)
    # edge lengths square coordinate differences, so they also catch near-overflow positions
    with np.errstate(over="ignore", invalid="ignore"):
        finite = np.all(np.isfinite(updated.vertices)) and np.all(np.isfinite(vertex_edge_length(updated)))
    if not finite:
        raise NumericalError(f"vertex update overflowed at step {index}", step=index)
    mesh = updated
    mesh, state = remesh_pass(mesh, state, cfg.remesh, stats)
    return mesh, state, value


def reconstruct(views, cfg: ReconstructionConfig = ReconstructionConfig(), init_mesh: TriMesh | None = None,
                progress=None):
    """Run the full optimization; returns ``(mesh, report)``."""
    views = list(views)
    if len(views) < 2:
        raise ParameterError("need at least 2 views")
    if len(views) < 3:
        log.warning("reconstructing from only %d views", len(views))
    t0 = time.perf_counter()
    mesh = init_mesh if init_mesh is not None else init_sphere_from_cameras(
        [v.camera for v in views], cfg.sphere_subdivisions
    )
    state = OptimState.zeros(mesh.n_vertices)
    stats = RemeshStats()
    report = RunReport()
    # bring the initial mesh into the edge band before the first step
    mesh, state = remesh_pass(mesh, state, cfg.remesh, stats)
    for i in range(cfg.steps):
        try:
            mesh, state, value = step(mesh, state, views, cfg, stats, i)
        except NumericalError as exc:
            report.error = str(exc)
            _finish_report(report, mesh, stats, t0)
            raise ReconstructionFailed(str(exc), i, mesh, report) from exc
        report.losses.append(float(value))
        if progress is not None:
            progress(i, value, mesh)
    _finish_report(report, mesh, stats, t0)
    return mesh, report


def _finish_report(report: RunReport, mesh: TriMesh, stats: RemeshStats, t0: float) -> None:
    report.n_vertices = mesh.n_vertices
    report.n_faces = mesh.n_faces
    report.wall_time = time.perf_counter() - t0
    report.remesh = {
        "splits": stats.splits,
        "collapses": stats.collapses,
        "collapses_skipped": stats.collapses_skipped,
        "flips": stats.flips,
        "budget_hits": stats.budget_hits,
    }
    report.audit = audit(mesh).as_dict()
