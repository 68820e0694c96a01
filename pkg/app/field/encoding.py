"""
Frequency (positional) encoding of field inputs.

Each coordinate v is mapped to
    [v?, sin(2^0 πv), cos(2^0 πv), …, sin(2^{l-1} πv), cos(2^{l-1} πv)]
where every term is a full d-vector and the identity block is optional.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import settings
from app.core.errors import ConfigurationError


class EncodingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    l_pos: int = Field(default_factory=lambda: settings.l_pos, ge=1)
    l_dir: int = Field(default_factory=lambda: settings.l_dir, ge=0)
    include_identity: bool = Field(default_factory=lambda: settings.include_identity)

    @property
    def position_dim(self) -> int:
        return encoded_dim(3, self.l_pos, self.include_identity)

    @property
    def direction_dim(self) -> int:
        return encoded_dim(3, self.l_dir, self.include_identity)


def encoded_dim(d: int, l: int, include_identity: bool) -> int:
    return d * 2 * l + (d if include_identity else 0)


def encode(v: np.ndarray, l: int, include_identity: bool) -> np.ndarray:
    """Encode the last axis of ``v``; keeps the input dtype."""
    if l < 0:
        raise ConfigurationError(f"frequency count must be >= 0, got {l}")
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    parts = [v] if include_identity else []
    for k in range(l):
        scaled = v * v.dtype.type((2.0 ** k) * np.pi)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    if not parts:
        return np.zeros(v.shape[:-1] + (0,), dtype=v.dtype)
    return np.concatenate(parts, axis=-1)
