"""
Dense σ grids sampled at voxel centres.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError
from app.render.renderer import Scene, as_query, resolve_threads

logger = logging.getLogger(__name__)

CANONICAL_DIRECTION = (0.0, 0.0, 1.0)
GRID_CHUNK = 65536


@dataclass
class DensityGrid:
    values: np.ndarray          # (Rx, Ry, Rz), indexed [ix, iy, iz]
    lower: np.ndarray           # (3,) bound corner
    upper: np.ndarray           # (3,)

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.values.shape)

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        """Continuous lattice coordinates (voxel-centre units) → scene units."""
        return self.lower + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.voxel_size


def cube_bounds(radius: float) -> Tuple[np.ndarray, np.ndarray]:
    return np.full(3, -float(radius)), np.full(3, float(radius))


def voxel_centres(lower: np.ndarray, upper: np.ndarray, resolution: Sequence[int]) -> np.ndarray:
    """(Rx·Ry·Rz, 3) centres in C order (x slowest)."""
    axes = [lower[a] + (np.arange(resolution[a]) + 0.5) * (upper[a] - lower[a]) / resolution[a] for a in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def sample_density_grid(
    scene: Scene,
    bounds: Tuple[Sequence[float], Sequence[float]],
    resolution: int | Sequence[int],
    direction: Sequence[float] = CANONICAL_DIRECTION,
    threads: Optional[int] = None,
) -> DensityGrid:
    """Query σ at every voxel centre with one fixed viewing direction."""
    res = (resolution,) * 3 if isinstance(resolution, (int, np.integer)) else tuple(resolution)
    if len(res) != 3 or min(res) < 2:
        raise ConfigurationError(f"grid resolution must be >= 2 per axis, got {res}")
    lower = np.asarray(bounds[0], dtype=np.float64)
    upper = np.asarray(bounds[1], dtype=np.float64)
    if np.any(upper <= lower):
        raise ConfigurationError(f"empty grid bounds {lower} .. {upper}")

    query = as_query(scene)
    centres = voxel_centres(lower, upper, res)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    starts = range(0, len(centres), GRID_CHUNK)

    def work(start: int) -> np.ndarray:
        pts = centres[start:start + GRID_CHUNK]
        sigma, _ = query(pts, np.broadcast_to(d, pts.shape))
        return np.asarray(sigma, dtype=np.float64)

    workers = min(resolve_threads(threads), len(starts))
    if workers <= 1:
        parts = [work(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    values = np.maximum(np.concatenate(parts), 0.0).reshape(res)
    logger.debug("Sampled %s density grid, max σ %.3f", res, float(values.max()), extra={"component": "geometry"})
    return DensityGrid(values=values, lower=lower, upper=upper)
