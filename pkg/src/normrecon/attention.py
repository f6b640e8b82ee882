"""Forward pass of the view-aware cross-attention layer, its camera pose code, and
the multi-view cosine objective. Deterministic numpy; no training."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, ReconError

MAGIC = b"MVAT"
DEFAULT_TOKENS = 577
DEFAULT_DIM = 1024


class WeightFileError(ReconError):
    pass


@dataclass
class AttentionWeights:
    W_Q: np.ndarray  # D,D
    W_K: np.ndarray
    W_V: np.ndarray
    pose_W: np.ndarray  # 7,D
    pose_b: np.ndarray  # D

    def __post_init__(self):
        D = self.W_Q.shape[0]
        for name in ("W_Q", "W_K", "W_V"):
            if getattr(self, name).shape != (D, D):
                raise ParameterError(f"{name} must be {D}x{D}")
        if self.pose_W.shape != (7, D) or self.pose_b.shape != (D,):
            raise ParameterError("pose projection must map 7 -> D")
        for name in ("W_Q", "W_K", "W_V", "pose_W", "pose_b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def random(cls, D: int, seed: int = 0, pose_bias: bool = True) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(D)
        return cls(
            rng.normal(0, s, (D, D)), rng.normal(0, s, (D, D)), rng.normal(0, s, (D, D)),
            rng.normal(0, s, (7, D)),
            rng.normal(0, s, D) if pose_bias else np.zeros(D),
        )

    def project_pose(self, code) -> np.ndarray:
        return np.asarray(code, dtype=np.float64) @ self.pose_W + self.pose_b


def save_weights(path, w: AttentionWeights, tokens: int = DEFAULT_TOKENS) -> None:
    """``MVAT`` header with (L, D) as uint32, then float32 W_Q, W_K, W_V, pose W, pose b."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", tokens, w.dim))
        for a in (w.W_Q, w.W_K, w.W_V, w.pose_W, w.pose_b):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path) -> tuple[AttentionWeights, int]:
    """Return ``(weights, token_length)``."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    L, D = struct.unpack("<II", data[4:12])
    if D == 0:
        raise WeightFileError(f"{path}: zero feature dimension")
    expected = 12 + 4 * (3 * D * D + 7 * D + D)
    if len(data) != expected:
        raise WeightFileError(f"{path}: expected {expected} bytes for D={D}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    parts, pos = [], 0
    for shape in ((D, D), (D, D), (D, D), (7, D), (D,)):
        n = int(np.prod(shape))
        parts.append(arr[pos:pos + n].reshape(shape))
        pos += n
    try:
        return AttentionWeights(*parts), L
    except ParameterError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (first non-zero entry positive when ``w == 0``)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) <= 0:
        raise ParameterError("not a rotation matrix")
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    nz = np.flatnonzero(np.abs(q) > 1e-12)
    if len(nz) and q[nz[0]] < 0:
        q = -q
    return q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def pose_code(cam) -> np.ndarray:
    """7-vector ``[qw, qx, qy, qz, tx, ty, tz]`` from a camera (or an ``(R, T)`` pair)."""
    R, T = (cam.R, cam.T) if hasattr(cam, "R") else cam
    return np.concatenate([rotation_to_quaternion(R), np.asarray(T, dtype=np.float64).reshape(3)])


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_attend(target: int, features, poses, weights: AttentionWeights, return_attention: bool = False):
    """Target-view queries attending over keys/values from every view (target included).

    The projected pose code of each view is added to all of its tokens first.
    """
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    if not feats:
        raise ParameterError("need at least one view")
    if len(poses) != len(feats):
        raise ParameterError("one pose code per view is required")
    if not 0 <= target < len(feats):
        raise ParameterError(f"target view {target} out of range")
    L, D = feats[0].shape
    if D != weights.dim or any(f.shape != (L, D) for f in feats):
        raise ParameterError("all views must share (L, D) matching the weights")
    tokens = [f + weights.project_pose(p) for f, p in zip(feats, poses)]
    Q = tokens[target] @ weights.W_Q
    K = np.concatenate([t @ weights.W_K for t in tokens])
    V = np.concatenate([t @ weights.W_V for t in tokens])
    A = softmax(Q @ K.T / np.sqrt(D))
    out = A @ V
    return (out, A) if return_attention else out


def cosine_objective(pred, gt) -> float:
    """``1 - mean over views of the mean per-pixel dot product`` on pixels valid in both."""
    return cosine_objective_and_grad(pred, gt)[0]


def cosine_objective_and_grad(pred, gt):
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt) or not pred:
        raise ParameterError("pred and gt must be non-empty lists of equal length")
    total = 0.0
    grads = []
    m = len(pred)
    for p, g in zip(pred, gt):
        if p.valid.shape != g.valid.shape:
            raise ParameterError("map sizes differ")
        both = p.valid & g.valid
        n = int(both.sum())
        if n == 0:
            raise ParameterError("a view has no overlapping pixels")
        total += float(np.sum(p.normals[both] * g.normals[both])) / n
        grad = np.zeros_like(p.normals)
        grad[both] = -g.normals[both] / (n * m)
        grads.append(grad)
    return 1.0 - total / m, grads


def naive_cross_attend(target, features, poses, weights: AttentionWeights) -> np.ndarray:
    """Explicit-loop reference implementation."""
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    L, D = feats[0].shape
    emb = [weights.project_pose(p) for p in poses]
    tok = [[[feats[v][i][d] + emb[v][d] for d in range(D)] for i in range(L)] for v in range(len(feats))]

    def matvec(x, W):
        return [sum(x[k] * W[k][j] for k in range(D)) for j in range(D)]

    q = [matvec(tok[target][i], weights.W_Q) for i in range(L)]
    keys, vals = [], []
    for v in range(len(feats)):
        for i in range(L):
            keys.append(matvec(tok[v][i], weights.W_K))
            vals.append(matvec(tok[v][i], weights.W_V))
    out = np.zeros((L, D))
    for i in range(L):
        scores = [sum(q[i][d] * k[d] for d in range(D)) / np.sqrt(D) for k in keys]
        mx = max(scores)
        ex = [np.exp(s - mx) for s in scores]
        z = sum(ex)
        for j, e in enumerate(ex):
            for d in range(D):
                out[i, d] += e / z * vals[j][d]
    return out


def run_invariant_suite(seed: int = 0, L: int = 4, D: int = 8, views: int = 3, weights: AttentionWeights | None = None):
    """Property checks on seeded instances; returns ``[(name, passed, detail)]``."""
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = AttentionWeights.random(D, seed)
    D = weights.dim
    feats = [rng.normal(size=(L, D)) for _ in range(views)]
    poses = []
    for _ in range(views):
        q = rng.normal(size=4)
        poses.append(np.concatenate([rotation_to_quaternion(quaternion_to_rotation(q)), rng.normal(size=3)]))
    results = []

    out, A = cross_attend(0, feats, poses, weights, return_attention=True)
    err = float(np.abs(A.sum(axis=1) - 1).max())
    results.append(("softmax rows sum to 1", err < 1e-6, f"max |sum-1| = {err:.2e}"))

    Vmat = np.concatenate([(f + weights.project_pose(p)) @ weights.W_V for f, p in zip(feats, poses)])
    lo, hi = Vmat.min(0) - 1e-9, Vmat.max(0) + 1e-9
    inside = bool(np.all((out >= lo) & (out <= hi)))
    results.append(("outputs are convex combinations of values", inside, "bounding-box check"))

    perm = [0] + list(rng.permutation(np.arange(1, views)))[::-1] if views > 1 else [0]
    out_p = cross_attend(0, [feats[i] for i in perm], [poses[i] for i in perm], weights)
    err = float(np.abs(out - out_p).max())
    results.append(("joint context permutation invariance", err < 1e-6, f"max diff = {err:.2e}"))

    if views > 1:
        shifted = [poses[(i + 1) % views] for i in range(views)]
        err = float(np.abs(out - cross_attend(0, feats, shifted, weights)).max())
        results.append(("pose codes matter (features permuted against poses)", err > 1e-6, f"max diff = {err:.2e}"))

    if L * D * D * views <= 100_000:
        err = float(np.abs(out - naive_cross_attend(0, feats, poses, weights)).max())
        results.append(("matches naive-loop oracle", err < 1e-9, f"max diff = {err:.2e}"))

    q = rotation_to_quaternion(quaternion_to_rotation(rng.normal(size=4)))
    err = float(np.abs(quaternion_to_rotation(q) - quaternion_to_rotation(rotation_to_quaternion(quaternion_to_rotation(q)))).max())
    results.append(("pose quaternion round trip", err < 1e-9 and q[0] >= 0, f"max diff = {err:.2e}"))

    from .raster import NormalMap

    # signed axis vectors are exactly unit length, so the endpoints can be checked exactly
    axes = np.concatenate([np.eye(3), -np.eye(3)])
    n = axes[rng.integers(0, 6, size=(6, 6))]
    valid = np.ones((6, 6), dtype=bool)
    a = NormalMap(n, valid)
    same = cosine_objective([a], [a])
    opposite = cosine_objective([a], [NormalMap(-n, valid)])
    results.append(("cosine objective endpoints", same == 0.0 and opposite == 2.0,
                    f"same = {same:.3g}, opposite = {opposite:.3g}"))
    return results
