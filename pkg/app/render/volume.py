"""
Sampling along rays and emission–absorption quadrature.

All functions are vectorised over a leading ray axis: sigma/delta/t are
(..., n), colours (..., n, 3).

    a_i = σ_i δ_i,   α_i = 1 − exp(−a_i)
    T_i = exp(−Σ_{j<i} a_j) = Π_{j<i} (1 − α_j)
    w_i = T_i α_i
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import settings
from app.core.errors import ContractError
from app.render.camera import RayBatch

DEPTH_EPS = 1e-6


class SamplingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_samples: int = Field(default_factory=lambda: settings.n_samples, ge=2)
    stratified: bool = True
    seed: int = Field(default_factory=lambda: settings.seed)
    white_background: bool = Field(default_factory=lambda: settings.white_background)

    def evaluation(self) -> "SamplingConfig":
        """Deterministic bin-midpoint variant used for test renders."""
        return self.model_copy(update={"stratified": False})


@dataclass
class RenderResult:
    rgb: np.ndarray             # (..., 3)
    depth: np.ndarray           # (...,)  0 where depth_valid is False
    opacity: np.ndarray         # (...,)
    weights: np.ndarray         # (..., n)
    transmittance: np.ndarray   # (..., n)
    depth_valid: np.ndarray     # (...,) bool

    @classmethod
    def concatenate(cls, parts: list["RenderResult"]) -> "RenderResult":
        return cls(
            rgb=np.concatenate([p.rgb for p in parts]),
            depth=np.concatenate([p.depth for p in parts]),
            opacity=np.concatenate([p.opacity for p in parts]),
            weights=np.concatenate([p.weights for p in parts]),
            transmittance=np.concatenate([p.transmittance for p in parts]),
            depth_valid=np.concatenate([p.depth_valid for p in parts]),
        )


def sample_along(
    rays: RayBatch,
    cfg: SamplingConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Bin-partitioned sample distances (R, n) and their spacings (R, n).

    Stratified mode draws one uniform offset per bin from ``rng`` (default:
    a generator seeded from ``cfg.seed``); otherwise bin midpoints are used.
    """
    n = cfg.n_samples
    near = np.asarray(rays.near, dtype=np.float64)[:, None]
    far = np.asarray(rays.far, dtype=np.float64)[:, None]
    edges = near + (far - near) * (np.arange(n + 1, dtype=np.float64) / n)[None, :]
    lower, width = edges[:, :-1], np.diff(edges, axis=1)
    if cfg.stratified:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        offsets = rng.random((len(rays), n))
    else:
        offsets = 0.5
    t = lower + width * offsets
    delta = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    return t, delta


def composite(
    sigma: np.ndarray,
    rgb: np.ndarray,
    delta: np.ndarray,
    t: np.ndarray,
    white_background: bool,
) -> RenderResult:
    sigma = np.asarray(sigma)
    if np.any(sigma < 0):
        raise ContractError("volume density must be non-negative")
    if sigma.shape != delta.shape or rgb.shape != sigma.shape + (3,):
        raise ContractError(f"sigma {sigma.shape}, rgb {rgb.shape}, delta {delta.shape} disagree")
    dtype = np.result_type(sigma, delta, np.float64)
    a = sigma.astype(dtype) * delta
    alpha = -np.expm1(-a)
    cum = np.cumsum(a, axis=-1)
    exclusive = np.concatenate([np.zeros_like(cum[..., :1]), cum[..., :-1]], axis=-1)
    trans = np.exp(-exclusive)
    weights = trans * alpha

    total = weights.sum(axis=-1)
    opacity = np.minimum(total, 1.0)
    colour = np.einsum("...n,...nc->...c", weights, rgb.astype(dtype))
    if white_background:
        colour = colour + (1.0 - opacity)[..., None]

    valid = opacity > DEPTH_EPS
    depth = np.einsum("...n,...n->...", weights, t) / np.maximum(total, DEPTH_EPS)
    depth = np.clip(depth, t[..., 0], t[..., -1])
    depth = np.where(valid, depth, 0.0)
    return RenderResult(
        rgb=colour,
        depth=depth,
        opacity=opacity,
        weights=weights,
        transmittance=trans,
        depth_valid=valid,
    )


def composite_backward(
    sigma: np.ndarray,
    rgb: np.ndarray,
    delta: np.ndarray,
    result: RenderResult,
    d_colour: np.ndarray,
    white_background: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. sigma (..., n) and rgb (..., n, 3).

    For g = dL/dC and e_i = g·c_i − g·bg:
        dL/dσ_k = δ_k (T_{k+1} e_k − Σ_{i>k} w_i e_i)
        dL/dc_i = w_i g
    """
    g = np.asarray(d_colour, dtype=result.weights.dtype)
    e = np.einsum("...nc,...c->...n", rgb, g)
    if white_background:
        e = e - g.sum(axis=-1)[..., None]
    we = result.weights * e
    suffix = we.sum(axis=-1, keepdims=True) - np.cumsum(we, axis=-1)
    trans_next = result.transmittance * np.exp(-(sigma * delta))
    d_sigma = delta * (trans_next * e - suffix)
    d_rgb = result.weights[..., None] * g[..., None, :]
    return d_sigma, d_rgb
