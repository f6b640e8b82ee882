"""PFM / PGM image containers for normal maps, depth maps and masks."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .raster import DepthMap, Frame, NormalMap


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; rows stored bottom-to-top as the format requires."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[2] == 3:
        tag = "PF"
    elif image.ndim == 2:
        tag = "Pf"
    else:
        raise ParameterError(f"PFM needs HxW or HxWx3 data, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


_HEADER = re.compile(rb"^(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", re.S)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise ParameterError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=m.end())
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))[::-1]
    return arr.astype(np.float64)


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ParameterError(f"{path}: not a binary PGM file")
    w, h = int(m.group(1)), int(m.group(2))
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return arr > 127


def save_normal_map(stem, nmap: NormalMap) -> None:
    """Write ``stem.pfm``, ``stem.pgm`` and the ``stem.json`` frame sidecar."""
    stem = str(stem)
    normals = np.where(nmap.valid[..., None], nmap.normals, 0.0)
    write_pfm(stem + ".pfm", normals)
    write_pgm(stem + ".pgm", nmap.valid)
    Path(stem + ".json").write_text(json.dumps({"frame": nmap.frame.value}))


def load_normal_map(stem, frame=None) -> NormalMap:
    stem = str(stem)
    normals = read_pfm(stem + ".pfm")
    if normals.ndim != 3:
        raise ParameterError(f"{stem}.pfm: expected a 3-channel PFM")
    mask_path = Path(stem + ".pgm")
    valid = read_pgm(mask_path) if mask_path.exists() else np.linalg.norm(normals, axis=-1) > 0.5
    side = Path(stem + ".json")
    if frame is None:
        frame = json.loads(side.read_text())["frame"] if side.exists() else Frame.CAMERA
    # float32 storage: renormalize on load
    length = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.where(valid[..., None], normals / np.where(length > 0, length, 1.0), 0.0)
    return NormalMap(normals, valid & (length[..., 0] > 0), Frame(frame))


def save_depth_map(path, dmap: DepthMap) -> None:
    write_pfm(path, np.where(dmap.valid, dmap.depth, 0.0))


def load_depth_map(path) -> DepthMap:
    depth = read_pfm(path)
    return DepthMap(depth, depth > 0)
