"""Normal-map and mesh evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoOverlapError, ParameterError
from .raster import DepthMap, Frame, NormalMap, render_normals

THRESHOLDS = (10, 20, 30)


@dataclass
class NormalMetrics:
    mean_angular_deg: float
    pct_below_10: float
    pct_below_20: float
    pct_below_30: float
    gradient_error: float
    valid_pixel_count: int


@dataclass
class MeshMetrics:
    normal: NormalMetrics
    depth_error: float
    views: int
    per_view: list

    def to_dict(self) -> dict:
        """Report layout: one row of the usual mesh comparison table."""
        n = self.normal
        return {
            "depth_error": self.depth_error,
            "mean_angular_deg": n.mean_angular_deg,
            "gradient_error": n.gradient_error,
            "pct_below": {"10": n.pct_below_10, "20": n.pct_below_20, "30": n.pct_below_30},
            "valid_pixel_count": n.valid_pixel_count,
            "views": self.views,
        }


def _counted(pred_valid, gt_valid, mask):
    if pred_valid.shape != gt_valid.shape:
        raise ParameterError(f"map sizes differ: {pred_valid.shape} vs {gt_valid.shape}")
    counted = pred_valid & gt_valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != counted.shape:
            raise ParameterError("mask size differs from the maps")
        counted &= mask
    return counted


def angular_errors(pred: NormalMap, gt: NormalMap, mask=None):
    """Per-pixel angle in degrees on counted pixels, and the counted mask."""
    counted = _counted(pred.valid, gt.valid, mask)
    a, b = pred.normals[counted], gt.normals[counted]
    # atan2 form is exact for identical vectors and accurate near 0 and 180 degrees
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    cos = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(sin, cos)), counted


def _sobel_response(img):
    """``(|Gx * img| + |Gy * img|) / 8`` per channel, zero padded.

    Evaluated separably (central difference, then 1-2-1 smoothing) so a locally
    constant image gives an exact zero response.
    """
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return (np.abs(gx) + np.abs(gy)) / 8.0


def normal_gradient_error(pred: NormalMap, gt: NormalMap, mask=None) -> float:
    """Mean L1 distance of Sobel responses over pixels whose whole 3x3 window is counted."""
    counted = _counted(pred.valid, gt.valid, mask)
    interior = ndimage.binary_erosion(counted, structure=np.ones((3, 3), dtype=bool), border_value=0)
    if not interior.any():
        raise NoOverlapError("no interior pixels for the gradient metric")
    sp = _sobel_response(np.where(counted[..., None], pred.normals, 0.0))
    sg = _sobel_response(np.where(counted[..., None], gt.normals, 0.0))
    return float(np.mean(np.abs(sp[interior] - sg[interior])))


def _check_frames(pred: NormalMap, gt: NormalMap):
    if pred.frame is not gt.frame:
        raise ParameterError("normal maps are in different frames")


def angular_metrics(pred: NormalMap, gt: NormalMap, mask=None) -> NormalMetrics:
    _check_frames(pred, gt)
    ang, counted = angular_errors(pred, gt, mask)
    if not len(ang):
        raise NoOverlapError("no pixels counted")
    try:
        grad = normal_gradient_error(pred, gt, mask)
    except NoOverlapError:
        grad = float("nan")
    pct = [100.0 * float(np.mean(ang < t)) for t in THRESHOLDS]
    return NormalMetrics(float(ang.mean()), *pct, grad, int(len(ang)))


def depth_error(pred: DepthMap, gt: DepthMap, mask=None, mm_per_unit: float | None = None) -> float:
    counted = _counted(pred.valid, gt.valid, mask)
    if not counted.any():
        raise NoOverlapError("no pixels counted")
    err = float(np.mean(np.abs(pred.depth[counted] - gt.depth[counted])))
    return err * mm_per_unit if mm_per_unit else err


def _aggregate(per_view_angles, per_view_grad, counts):
    ang = np.concatenate(per_view_angles)
    pct = [100.0 * float(np.mean(ang < t)) for t in THRESHOLDS]
    grads = [(g, c) for g, c in zip(per_view_grad, counts) if np.isfinite(g)]
    grad = float(np.average([g for g, _ in grads], weights=[c for _, c in grads])) if grads else float("nan")
    return NormalMetrics(float(ang.mean()), *pct, grad, int(len(ang)))


def evaluate_mesh(pred_mesh, gt_mesh, eval_cams, masks=None, mm_per_unit: float | None = None) -> MeshMetrics:
    """Render both meshes from each camera and pool the pixel metrics over all views.

    Angles and threshold percentages pool pixels; gradient and depth errors are
    pixel-weighted means of the per-view values, which equals pooling.
    """
    cams = list(eval_cams)
    if masks is None:
        masks = [None] * len(cams)
    angles, grads, counts, depth_sum, per_view = [], [], [], 0.0, []
    for cam, mask in zip(cams, masks):
        pn, pd, _ = render_normals(pred_mesh, cam, Frame.CAMERA)
        gn, gd, _ = render_normals(gt_mesh, cam, Frame.CAMERA)
        ang, counted = angular_errors(pn, gn, mask)
        if not len(ang):
            continue
        try:
            g = normal_gradient_error(pn, gn, mask)
        except NoOverlapError:
            g = float("nan")
        d = depth_error(pd, gd, mask)
        angles.append(ang)
        grads.append(g)
        counts.append(len(ang))
        depth_sum += d * len(ang)
        per_view.append({"mean_angular_deg": float(ang.mean()), "depth_error": d, "gradient_error": g,
                         "pixels": int(len(ang))})
    if not angles:
        raise NoOverlapError("predicted and ground-truth renders never overlap")
    normal = _aggregate(angles, grads, counts)
    depth = depth_sum / sum(counts)
    if mm_per_unit:
        depth *= mm_per_unit
    return MeshMetrics(normal, float(depth), len(angles), per_view)


def evaluate_normal_maps(preds, gts, masks=None) -> NormalMetrics:
    """Pool pixel metrics over paired normal maps (same frame per pair)."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ParameterError("need equally many predicted and ground-truth maps")
    if masks is None:
        masks = [None] * len(preds)
    angles, grads, counts = [], [], []
    for p, g, mask in zip(preds, gts, masks):
        _check_frames(p, g)
        ang, _ = angular_errors(p, g, mask)
        if not len(ang):
            continue
        try:
            grads.append(normal_gradient_error(p, g, mask))
        except NoOverlapError:
            grads.append(float("nan"))
        angles.append(ang)
        counts.append(len(ang))
    if not angles:
        raise NoOverlapError("no pixels counted in any view")
    return _aggregate(angles, grads, counts)
