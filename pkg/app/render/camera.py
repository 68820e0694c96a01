"""
Pinhole cameras and ray generation.

Camera frame: x right, y up, looking down −z. Pixel (col, row) is sampled
through its centre (col + 0.5, row + 0.5); image rows grow downwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.errors import ContractError

ORTHONORMAL_TOLERANCE = 1e-6

PoseRows = Tuple[
    Tuple[float, float, float, float],
    Tuple[float, float, float, float],
    Tuple[float, float, float, float],
]


class Camera(BaseModel):
    """Intrinsics (pixels) + 3×4 camera-to-world pose (scene units)."""

    model_config = ConfigDict(frozen=True)

    focal: float = Field(gt=0.0)
    cx: float
    cy: float
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    pose: PoseRows

    @model_validator(mode="after")
    def _orthonormal_rotation(self) -> "Camera":
        rot = np.asarray(self.pose, dtype=np.float64)[:, :3]
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ORTHONORMAL_TOLERANCE:
            raise ValueError(f"pose rotation is not orthonormal (max deviation {err:.3g})")
        return self

    @property
    def pose_matrix(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose_matrix[:, :3]

    @property
    def position(self) -> np.ndarray:
        return self.pose_matrix[:, 3]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @classmethod
    def centred(cls, focal: float, width: int, height: int, pose: np.ndarray) -> "Camera":
        """Camera whose principal point sits at the image centre."""
        return cls(focal=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height, pose=pose_rows(pose))


def pose_rows(pose: np.ndarray) -> PoseRows:
    m = np.asarray(pose, dtype=np.float64)
    if m.shape != (3, 4):
        raise ContractError(f"pose must be 3×4, got {m.shape}")
    return tuple(tuple(float(v) for v in row) for row in m)  # type: ignore[return-value]


def look_at(eye: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0), up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """3×4 camera-to-world matrix placing the camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ContractError("view direction is parallel to the up vector")
    right /= norm
    true_up = np.cross(back, right)
    return np.column_stack([right, true_up, back, eye])


@dataclass
class RayBatch:
    """R rays: origins/directions (R, 3), near/far (R,), source pixel ids (R,)."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixel_ids: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, index: slice | np.ndarray) -> "RayBatch":
        return RayBatch(
            self.origins[index], self.directions[index], self.near[index], self.far[index], self.pixel_ids[index]
        )


def pixel_directions(cam: Camera, pixel_ids: np.ndarray) -> np.ndarray:
    """World-space unit directions for flat pixel indices (row * width + col)."""
    rows, cols = np.divmod(pixel_ids, cam.width)
    x = (cols + 0.5 - cam.cx) / cam.focal
    y = -(rows + 0.5 - cam.cy) / cam.focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_world = d_cam @ cam.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(
    cam: Camera,
    pixels: Optional[Sequence[int] | np.ndarray] = None,
    near: float = 2.0,
    far: float = 6.0,
) -> RayBatch:
    """One ray per requested pixel (all pixels, row-major, when ``pixels`` is None)."""
    if not 0 < near < far:
        raise ContractError(f"need 0 < near < far, got near={near}, far={far}")
    if pixels is None:
        ids = np.arange(cam.n_pixels, dtype=np.int64)
    else:
        ids = np.asarray(pixels, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= cam.n_pixels):
            raise ContractError(f"pixel index out of bounds for a {cam.width}×{cam.height} image")
    directions = pixel_directions(cam, ids)
    origins = np.broadcast_to(cam.position, directions.shape).copy()
    return RayBatch(
        origins=origins,
        directions=directions,
        near=np.full(ids.shape, float(near)),
        far=np.full(ids.shape, float(far)),
        pixel_ids=ids,
    )


def near_far(cam: Camera, bounds_radius: float, padding: float) -> Tuple[float, float]:
    """Near/far planes bracketing a bounding sphere at the origin, padded."""
    radius = bounds_radius * (1.0 + padding)
    dist = float(np.linalg.norm(cam.position))
    if dist <= radius:
        raise ContractError(f"camera at distance {dist:.3f} sits inside the padded bounds {radius:.3f}")
    return dist - radius, dist + radius
