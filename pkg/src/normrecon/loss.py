"""Frontal-weighted cosine normal loss, Laplacian term and the total objective."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import Camera, pixel_directions
from .errors import NoOverlapError, ParameterError
from .mesh import TriMesh, _vertex_normals, laplacian_loss, vertex_normals_backward
from .raster import Frame, NormalMap, backward_to_vertex_normals, rasterize, shade


@dataclass(frozen=True)
class LossConfig:
    lambda_lap: float = 0.1
    alpha: float = 2.5
    normalize_weights: bool = True
    # divide the Laplacian term by the mean squared edge length (scale-free smoothing)
    relative_laplacian: bool = True

    def __post_init__(self):
        if self.lambda_lap < 0:
            raise ParameterError("lambda_lap must be >= 0")
        if not self.alpha > 0:
            raise ParameterError("alpha must be > 0")


@dataclass
class View:
    """One calibrated view: canonical camera, canonical target normals and weights."""

    camera: Camera
    target: NormalMap
    weights: np.ndarray


def frontal_weight(x, alpha: float):
    """``(exp(alpha*x) - 1) / (exp(alpha) - 1)`` on ``x`` clamped to [0, 1]."""
    x = np.clip(x, 0.0, 1.0)
    return np.expm1(alpha * x) / np.expm1(alpha)


def pixel_weights(normals: NormalMap, cam: Camera, alpha: float = 2.5) -> np.ndarray:
    """Per-pixel frontal-facing weights; zero outside the mask."""
    to_cam = -pixel_directions(cam)
    if normals.frame is Frame.CAMERA:
        to_cam = to_cam @ cam.R.T
    x = np.sum(normals.normals * to_cam, axis=-1)
    w = frontal_weight(x, alpha)
    w[~normals.valid] = 0.0
    return w


def normal_loss(rendered, target, weights, normalize_weights: bool = True):
    """Weighted cosine loss over views and its gradient w.r.t. each rendered image.

    Pixels count only where both maps are valid.
    """
    rendered, target, weights = list(rendered), list(target), list(weights)
    if not (len(rendered) == len(target) == len(weights)) or not rendered:
        raise ParameterError("rendered, target and weights must be non-empty and of equal length")
    masked = []
    for r, t, w in zip(rendered, target, weights):
        if r.valid.shape != t.valid.shape or w.shape != r.valid.shape:
            raise ParameterError("view shapes disagree")
        if r.frame is not t.frame:
            raise ParameterError(f"frame mismatch: rendered {r.frame.value}, target {t.frame.value}")
        masked.append(np.where(r.valid & t.valid, w, 0.0))
    m = len(rendered)
    if normalize_weights:
        total = float(sum(w.sum() for w in masked))
        if total <= 0:
            raise NoOverlapError("total weight is zero; rendered and target masks do not overlap")
        scales = [1.0 / total] * m
    else:
        scales = []
        for w, r, t in zip(masked, rendered, target):
            count = int(np.count_nonzero(r.valid & t.valid))
            scales.append(1.0 / (m * count) if count else 0.0)
        if not any(scales) or sum(w.sum() for w in masked) <= 0:
            raise NoOverlapError("no overlapping pixels")
    value = 1.0
    grads = []
    for r, t, w, sc in zip(rendered, target, masked, scales):
        ws = w * sc
        value -= float(np.sum(ws * np.sum(t.normals * r.normals, axis=-1)))
        grads.append(-ws[..., None] * t.normals)
    return value, grads


def _render_view(mesh, vn, view: View):
    cache = rasterize(mesh, view.camera, Frame.CANONICAL)
    return cache, shade(cache, mesh.faces, vn, view.camera)


def total_loss(mesh: TriMesh, views, cfg: LossConfig = LossConfig(), threads: int = 1, return_parts: bool = False):
    """Normal loss plus ``lambda_lap`` times the Laplacian loss, with per-vertex gradients.

    Per-view work may run on ``threads`` workers; reductions always follow view order.
    """
    views = list(views)
    vcache = _vertex_normals(mesh.vertices, mesh.faces)
    vn = vcache[0]
    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(threads) as pool:
            rendered = list(pool.map(lambda v: _render_view(mesh, vn, v), views))
    else:
        rendered = [_render_view(mesh, vn, v) for v in views]
    caches = [c for c, _ in rendered]
    l_normal, grads = normal_loss(
        [n for _, n in rendered], [v.target for v in views], [v.weights for v in views], cfg.normalize_weights
    )

    def backward(i):
        return backward_to_vertex_normals(caches[i], mesh.faces, vn, views[i].camera, grads[i])

    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_view = list(pool.map(backward, range(len(views))))
    else:
        per_view = [backward(i) for i in range(len(views))]
    g_vn = np.zeros_like(vn)
    for g in per_view:
        g_vn += g
    grad = vertex_normals_backward(mesh.vertices, mesh.faces, g_vn, vcache)
    l_lap, g_lap = laplacian_loss(mesh, relative=cfg.relative_laplacian)
    value = l_normal + cfg.lambda_lap * l_lap
    grad = grad + cfg.lambda_lap * g_lap
    if return_parts:
        return value, grad, {"normal": l_normal, "laplacian": l_lap, "caches": caches}
    return value, grad


def make_views(cams, targets, alpha: float = 2.5) -> list[View]:
    """Bundle canonical cameras and targets with precomputed frontal weights."""
    views = []
    for cam, t in zip(cams, targets):
        if t.frame is not Frame.CANONICAL:
            raise ParameterError("targets must be canonical-frame normal maps")
        views.append(View(cam, t, pixel_weights(t, cam, alpha)))
    return views
