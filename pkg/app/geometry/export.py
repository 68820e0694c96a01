"""
Mesh and depth-map files.

Mesh (.obj): ``v x y z`` lines (17 significant digits), then ``f i j k``
lines with 1-based vertex indices.

Depth raw (.depth): u32 width, u32 height, then width·height f32 depths in
row-major order, little-endian; 0 where the ray was empty.
Depth visualisation (.pgm): 8-bit, 255 at the near plane, 0 at the far
plane; empty pixels are drawn at the far plane.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.core.errors import ContractError, DatasetIOError, ImageDecodeError
from app.geometry.marching_cubes import TriangleMesh
from app.scene.images import write_gray

_DEPTH_HEADER = struct.Struct("<II")


def mesh_to_obj(mesh: TriangleMesh) -> str:
    lines = [f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    lines += ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    return "\n".join(lines) + "\n"


def export_mesh(mesh: TriangleMesh, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(mesh_to_obj(mesh), encoding="ascii")
    except OSError as exc:
        raise DatasetIOError(f"cannot write mesh {path}: {exc}", path=str(path)) from exc
    return path


def depth_visualization(depth_map: np.ndarray, near: float, far: float,
                        valid: Optional[np.ndarray] = None) -> np.ndarray:
    """uint8 image: 255 at ``near``, 0 at ``far``, invalid pixels at far."""
    depth = np.asarray(depth_map, dtype=np.float64)
    valid = depth > 0 if valid is None else np.asarray(valid, dtype=bool)
    depth = np.where(valid, depth, far)
    scaled = np.clip((far - depth) / (far - near), 0.0, 1.0)
    return np.rint(scaled * 255.0).astype(np.uint8)


def export_depth(
    depth_map: np.ndarray,
    path: str | Path,
    near: float,
    far: float,
    valid: Optional[np.ndarray] = None,
) -> Tuple[Path, Path]:
    """Write ``<path>`` (raw f32) and ``<path>.pgm`` (visualisation)."""
    depth = np.asarray(depth_map)
    if depth.ndim != 2:
        raise ContractError(f"depth map must be 2-D, got {depth.shape}")
    if not 0 <= near < far:
        raise ContractError(f"need 0 <= near < far, got {near}, {far}")
    raw_path = Path(path)
    vis_path = raw_path.with_suffix(".pgm")
    height, width = depth.shape
    try:
        raw_path.parent.mkdir(parents=True, exist_ok=True)
        raw_path.write_bytes(_DEPTH_HEADER.pack(width, height) + depth.astype("<f4").tobytes())
    except OSError as exc:
        raise DatasetIOError(f"cannot write depth map {raw_path}: {exc}", path=str(raw_path)) from exc
    write_gray(vis_path, depth_visualization(depth, near, far, valid))
    return raw_path, vis_path


def read_depth(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read depth map {path}: {exc}", path=str(path)) from exc
    if len(data) < _DEPTH_HEADER.size:
        raise ImageDecodeError(f"{path}: truncated depth header", path=str(path))
    width, height = _DEPTH_HEADER.unpack_from(data)
    body = data[_DEPTH_HEADER.size:]
    if len(body) != 4 * width * height:
        raise ImageDecodeError(f"{path}: expected {width}×{height} depths, found {len(body) // 4}", path=str(path))
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float32)
