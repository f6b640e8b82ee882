"""Multi-view normal-map mesh reconstruction: calibration, differentiable normal
rendering, continuous remeshing, evaluation metrics and a cross-view attention layer."""

from .camera import Camera, CameraSamplerConfig, look_at, sample_cameras
from .calibrate import SimilarityTransform, calibrate_session, canonicalize, fit_similarity, triangulate
from .errors import (
    DegenerateError,
    NoOverlapError,
    NumericalError,
    ParameterError,
    ReconError,
    RemeshCorruptionError,
)
from .loss import LossConfig, make_views, total_loss
from .mesh import TriMesh, audit, make_icosphere
from .metrics import angular_metrics, evaluate_mesh
from .optimize import ReconstructionConfig, reconstruct
from .raster import DepthMap, Frame, NormalMap, render_normals
from .remesh import RemeshConfig, remesh_pass

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CameraSamplerConfig",
    "DegenerateError",
    "DepthMap",
    "Frame",
    "LossConfig",
    "NoOverlapError",
    "NormalMap",
    "NumericalError",
    "ParameterError",
    "ReconError",
    "ReconstructionConfig",
    "RemeshConfig",
    "RemeshCorruptionError",
    "SimilarityTransform",
    "TriMesh",
    "angular_metrics",
    "audit",
    "calibrate_session",
    "canonicalize",
    "evaluate_mesh",
    "fit_similarity",
    "look_at",
    "make_icosphere",
    "make_views",
    "reconstruct",
    "remesh_pass",
    "render_normals",
    "sample_cameras",
    "total_loss",
    "triangulate",
]
