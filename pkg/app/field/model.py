"""
The scene function: encoded 5D input → (σ, view-dependent rgb).

Two MLPs make up a ``RadianceField``:
  trunk: encoded position → [raw σ, feature…]
  head:  [feature…, encoded direction] → raw rgb
σ = softplus(raw σ) is tapped before the direction enters, so density is
direction-independent by construction; rgb = logistic(raw rgb).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.config import settings
from app.core.errors import ContractError
from app.field.encoding import EncodingConfig, encode
from app.mlp.network import (
    ActivationTape,
    MaskedMatrix,
    Network,
    NetworkSpec,
    Parameter,
    backward,
    forward,
    init_network,
)

DIRECTION_TOLERANCE = 1e-6


# ── Domain types ──────────────────────────────────────────────────

class FieldSample(BaseModel):
    """One field query. Build from angles with ``FieldSample.from_angles``."""

    model_config = ConfigDict(frozen=True)

    position: Tuple[float, float, float]
    direction: Tuple[float, float, float]

    @model_validator(mode="after")
    def _unit_direction(self) -> "FieldSample":
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > DIRECTION_TOLERANCE:
            raise ValueError(f"direction must be a unit vector, |d| = {norm}")
        return self

    @classmethod
    def from_angles(cls, position: Tuple[float, float, float], theta: float, phi: float) -> "FieldSample":
        """θ = polar angle from +z, φ = azimuth from +x."""
        direction = (
            float(np.sin(theta) * np.cos(phi)),
            float(np.sin(theta) * np.sin(phi)),
            float(np.cos(theta)),
        )
        return cls(position=position, direction=direction)


@dataclass(frozen=True)
class FieldOutput:
    sigma: float
    rgb: Tuple[float, float, float]


# ── Field ─────────────────────────────────────────────────────────

@dataclass
class RadianceField:
    trunk: Network
    head: Network
    encoding: EncodingConfig
    seed: int = 0

    def __post_init__(self) -> None:
        check_architecture(self.trunk, self.head, self.encoding)

    @property
    def networks(self) -> Tuple[Network, Network]:
        return self.trunk, self.head

    @property
    def dtype(self) -> np.dtype:
        return self.trunk.dtype

    @property
    def feature_dim(self) -> int:
        return self.trunk.spec.out_dim - 1

    def parameters(self) -> List[Parameter]:
        return self.trunk.parameters() + self.head.parameters()

    def weight_matrices(self) -> List[MaskedMatrix]:
        return self.trunk.weight_matrices() + self.head.weight_matrices()

    def layer_names(self) -> List[str]:
        return self.trunk.layer_names("trunk") + self.head.layer_names("head")

    def touch(self) -> None:
        self.trunk.touch()
        self.head.touch()

    def zero_grad(self) -> None:
        self.trunk.zero_grad()
        self.head.zero_grad()

    @property
    def total_weights(self) -> int:
        return self.trunk.total_weights + self.head.total_weights

    def mask_popcount(self) -> int:
        return self.trunk.mask_popcount() + self.head.mask_popcount()

    def copy(self) -> "RadianceField":
        return copy.deepcopy(self)

    def astype(self, dtype: np.dtype) -> "RadianceField":
        return RadianceField(self.trunk.astype(dtype), self.head.astype(dtype), self.encoding, self.seed)


def check_architecture(trunk: Network, head: Network, encoding: EncodingConfig) -> None:
    if trunk.spec.in_dim != encoding.position_dim:
        raise ContractError(
            f"trunk input width {trunk.spec.in_dim} != encoded position width {encoding.position_dim}"
        )
    if trunk.spec.out_dim < 2:
        raise ContractError("trunk must emit raw sigma plus at least one feature")
    if head.spec.in_dim != trunk.spec.out_dim - 1 + encoding.direction_dim:
        raise ContractError(
            f"head input width {head.spec.in_dim} != feature {trunk.spec.out_dim - 1} "
            f"+ encoded direction {encoding.direction_dim}"
        )
    if head.spec.out_dim != 3:
        raise ContractError(f"head must emit 3 colour channels, got {head.spec.out_dim}")


def field_specs(
    encoding: EncodingConfig,
    seed: int,
    hidden_width: Optional[int] = None,
    hidden_layers: Optional[int] = None,
    skip_input_at: Optional[int] = None,
    head_width: Optional[int] = None,
) -> Tuple[NetworkSpec, NetworkSpec]:
    """Trunk and head specs for the desk-scale architecture."""
    width = hidden_width or settings.hidden_width
    layers = hidden_layers or settings.hidden_layers
    skip = settings.skip_input_at if skip_input_at is None else skip_input_at
    head_w = head_width or settings.head_width
    trunk = NetworkSpec(
        layer_widths=(encoding.position_dim,) + (width,) * layers + (width + 1,),
        skip_input_at=skip if skip > 0 else None,
        seed=seed,
    )
    head = NetworkSpec(
        layer_widths=(width + encoding.direction_dim, head_w, 3),
        seed=seed + 1,
    )
    return trunk, head


def build_field(
    seed: Optional[int] = None,
    encoding: Optional[EncodingConfig] = None,
    **widths: int,
) -> RadianceField:
    seed = settings.seed if seed is None else seed
    encoding = encoding or EncodingConfig()
    trunk_spec, head_spec = field_specs(encoding, seed, **widths)
    return RadianceField(init_network(trunk_spec), init_network(head_spec), encoding, seed)


# ── Activations ───────────────────────────────────────────────────

def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x.dtype.type(0), x)


def logistic(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


# ── Forward / backward ────────────────────────────────────────────

@dataclass
class FieldTape:
    trunk_tape: ActivationTape
    head_tape: ActivationTape
    raw_sigma: np.ndarray
    rgb: np.ndarray


def field_forward(
    field: RadianceField,
    positions: np.ndarray,
    directions: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, FieldTape]:
    """Query N points; returns sigma (N,), rgb (N, 3) and a tape."""
    positions = np.asarray(positions, dtype=field.dtype)
    directions = np.asarray(directions, dtype=field.dtype)
    if positions.shape != directions.shape or positions.ndim != 2 or positions.shape[1] != 3:
        raise ContractError(f"positions {positions.shape} / directions {directions.shape} must both be N×3")
    enc = field.encoding
    trunk_out, trunk_tape = forward(field.trunk, encode(positions, enc.l_pos, enc.include_identity))
    raw_sigma = trunk_out[:, 0]
    head_in = np.concatenate(
        [trunk_out[:, 1:], encode(directions, enc.l_dir, enc.include_identity)], axis=1
    )
    raw_rgb, head_tape = forward(field.head, head_in)
    sigma = softplus(raw_sigma)
    rgb = logistic(raw_rgb)
    return sigma, rgb, FieldTape(trunk_tape, head_tape, raw_sigma, rgb)


def field_backward(field: RadianceField, tape: FieldTape, d_sigma: np.ndarray, d_rgb: np.ndarray) -> None:
    """Accumulate parameter gradients from d(loss)/dσ and d(loss)/d(rgb)."""
    d_raw_rgb = np.asarray(d_rgb, dtype=field.dtype) * tape.rgb * (1 - tape.rgb)
    d_head_in = backward(field.head, tape.head_tape, d_raw_rgb)
    d_raw_sigma = np.asarray(d_sigma, dtype=field.dtype) * logistic(tape.raw_sigma)
    d_trunk_out = np.concatenate([d_raw_sigma[:, None], d_head_in[:, : field.feature_dim]], axis=1)
    backward(field.trunk, tape.trunk_tape, d_trunk_out)


def query_points(field: RadianceField, positions: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sigma, rgb, _ = field_forward(field, positions, directions)
    return sigma, rgb


def query_field(field: RadianceField, sample: FieldSample) -> FieldOutput:
    sigma, rgb = query_points(field, np.array([sample.position]), np.array([sample.direction]))
    return FieldOutput(sigma=float(sigma[0]), rgb=(float(rgb[0, 0]), float(rgb[0, 1]), float(rgb[0, 2])))
