"""
Analytic benchmark scenes: a union of spheres and boxes with closed-form
density and albedo. They stand in for captured data and render their own
ground truth through the same quadrature the learned field uses.
"""

from __future__ import annotations

from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import settings

Vec3 = Tuple[float, float, float]

# Shading: view-dependent brightening toward a fixed key light.
LIGHT_DIRECTION = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
AMBIENT = 0.85
SPECULAR = 0.15


class Shape(str, Enum):
    SPHERE = "sphere"
    BOX = "box"


class Primitive(BaseModel):
    """``size`` is the radius of a sphere or the half-extents of a box."""

    model_config = ConfigDict(frozen=True)

    shape: Shape
    center: Vec3
    size: Vec3
    albedo: Vec3
    density: float = Field(ge=0.0)

    @field_validator("size")
    @classmethod
    def _positive_size(cls, v: Vec3) -> Vec3:
        if any(s <= 0 for s in v):
            raise ValueError(f"primitive size must be positive, got {v}")
        return v

    @field_validator("albedo")
    @classmethod
    def _unit_albedo(cls, v: Vec3) -> Vec3:
        if any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError(f"albedo channels must lie in [0, 1], got {v}")
        return v

    def signed_depth(self, positions: np.ndarray) -> np.ndarray:
        """Positive inside, in scene units (exact for spheres, Chebyshev for boxes)."""
        offset = positions - np.asarray(self.center)
        if self.shape is Shape.SPHERE:
            return self.size[0] - np.linalg.norm(offset, axis=-1)
        return np.min(np.asarray(self.size) - np.abs(offset), axis=-1)


class AnalyticScene(BaseModel):
    """Density is the sum over primitives; colour is their density-weighted albedo.

    ``edge_softness`` > 0 replaces each hard boundary with a logistic ramp of
    that width so quadrature converges smoothly; 0 keeps exact boundaries.
    """

    model_config = ConfigDict(frozen=True)

    primitives: List[Primitive] = Field(min_length=1)
    bounds_radius: float = Field(gt=0.0)
    edge_softness: float = Field(default=0.0, ge=0.0)

    def occupancy(self, positions: np.ndarray) -> np.ndarray:
        """(N, P) soft membership of every point in every primitive."""
        depth = np.stack([p.signed_depth(positions) for p in self.primitives], axis=-1)
        if self.edge_softness == 0.0:
            return (depth >= 0).astype(np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * depth / self.edge_softness))

    def query(self, positions: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Same call shape as a learned field: (N, 3), (N, 3) → σ (N,), rgb (N, 3)."""
        positions = np.asarray(positions, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        densities = np.array([p.density for p in self.primitives])
        albedos = np.array([p.albedo for p in self.primitives])

        contrib = self.occupancy(positions) * densities
        sigma = contrib.sum(axis=-1)
        safe = np.where(sigma > 0, sigma, 1.0)[:, None]
        albedo = (contrib @ albedos) / safe
        shade = AMBIENT + SPECULAR * (-directions @ LIGHT_DIRECTION)
        rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
        return sigma, rgb

    __call__ = query


def benchmark_scene() -> AnalyticScene:
    """Three spheres and a box; the glass-blue sphere is semi-transparent."""
    return AnalyticScene(
        primitives=[
            Primitive(shape=Shape.SPHERE, center=(0.0, 0.0, 0.15), size=(0.55, 0.55, 0.55),
                      albedo=(0.85, 0.25, 0.2), density=40.0),
            Primitive(shape=Shape.SPHERE, center=(0.65, 0.55, -0.2), size=(0.35, 0.35, 0.35),
                      albedo=(0.2, 0.75, 0.3), density=30.0),
            Primitive(shape=Shape.SPHERE, center=(-0.55, 0.6, 0.35), size=(0.4, 0.4, 0.4),
                      albedo=(0.25, 0.45, 0.95), density=2.0),
            Primitive(shape=Shape.BOX, center=(0.0, -0.55, -0.55), size=(0.75, 0.3, 0.2),
                      albedo=(0.95, 0.85, 0.3), density=35.0),
        ],
        bounds_radius=settings.scene_bounds_radius,
        edge_softness=0.04,
    )


def sphere_scene(radius: float = 1.0, density: float = 50.0, albedo: Vec3 = (0.8, 0.8, 0.8)) -> AnalyticScene:
    """One hard-edged sphere at the origin (silhouette, depth and mesh checks)."""
    return AnalyticScene(
        primitives=[
            Primitive(shape=Shape.SPHERE, center=(0.0, 0.0, 0.0), size=(radius, radius, radius),
                      albedo=albedo, density=density),
        ],
        bounds_radius=settings.scene_bounds_radius,
    )
