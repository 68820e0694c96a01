"""
Image rendering over any density/colour query function.

Rays are processed in fixed-size chunks whose boundaries depend only on the
pixel index; chunk ``c`` draws its stratified offsets from
``default_rng([seed, RENDER_STREAM, c])``. Chunks are mapped over a thread
pool and concatenated in order, so the output does not depend on the
worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from app.core import prometheus_metrics as prom
from app.core.config import settings
from app.core.monitoring import inc, machine_parallelism
from app.field.model import RadianceField, query_points
from app.render.camera import Camera, RayBatch, generate_rays
from app.render.volume import RenderResult, SamplingConfig, composite, sample_along

logger = logging.getLogger(__name__)

RENDER_STREAM = 1

QueryFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
Scene = Union[RadianceField, QueryFn]


def as_query(scene: Scene) -> QueryFn:
    """Wrap a field so it can be rendered like an analytic scene."""
    if isinstance(scene, RadianceField):
        return lambda positions, directions: query_points(scene, positions, directions)
    return scene


def resolve_threads(threads: Optional[int]) -> int:
    n = settings.threads if threads is None else threads
    return n if n and n > 0 else machine_parallelism()


def sample_points(rays: RayBatch, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened (R·n, 3) positions and matching directions."""
    positions = rays.origins[:, None, :] + rays.directions[:, None, :] * t[..., None]
    directions = np.broadcast_to(rays.directions[:, None, :], positions.shape)
    return positions.reshape(-1, 3), directions.reshape(-1, 3)


def render_rays(
    scene: Scene,
    rays: RayBatch,
    cfg: SamplingConfig,
    rng: Optional[np.random.Generator] = None,
) -> RenderResult:
    """Render one batch of rays in the calling thread."""
    query = as_query(scene)
    t, delta = sample_along(rays, cfg, rng)
    positions, directions = sample_points(rays, t)
    sigma, rgb = query(positions, directions)
    shape = t.shape
    return composite(sigma.reshape(shape), rgb.reshape(shape + (3,)), delta, t, cfg.white_background)


def chunk_rng(cfg: SamplingConfig, chunk: int) -> Optional[np.random.Generator]:
    if not cfg.stratified:
        return None
    return np.random.default_rng([cfg.seed, RENDER_STREAM, chunk])


def render_pixels(
    scene: Scene,
    cam: Camera,
    cfg: SamplingConfig,
    near: float,
    far: float,
    pixels: Optional[Sequence[int] | np.ndarray] = None,
    threads: Optional[int] = None,
    chunk_rays: Optional[int] = None,
    purpose: str = "render",
) -> RenderResult:
    """Render the requested pixels (all of them by default) as flat arrays."""
    rays = generate_rays(cam, pixels, near, far)
    size = chunk_rays or settings.render_chunk_rays
    starts = range(0, len(rays), size)
    query = as_query(scene)

    def work(chunk: int) -> RenderResult:
        start = starts[chunk]
        return render_rays(query, rays.subset(slice(start, start + size)), cfg, chunk_rng(cfg, chunk))

    workers = min(resolve_threads(threads), max(len(starts), 1))
    if workers <= 1:
        parts = [work(c) for c in range(len(starts))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, range(len(starts))))

    inc("rays_rendered", len(rays))
    prom.rays_rendered_total.labels(purpose=purpose).inc(len(rays))
    return RenderResult.concatenate(parts)


def render_image(
    scene: Scene,
    cam: Camera,
    cfg: SamplingConfig,
    near: float,
    far: float,
    threads: Optional[int] = None,
    purpose: str = "render",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-frame render: image (H, W, 3), depth map (H, W), opacity map (H, W)."""
    result = render_pixels(scene, cam, cfg, near, far, threads=threads, purpose=purpose)
    h, w = cam.height, cam.width
    logger.debug("Rendered %dx%d view", w, h, extra={"component": "renderer"})
    return (
        result.rgb.reshape(h, w, 3),
        result.depth.reshape(h, w),
        result.opacity.reshape(h, w),
    )
