"""
Dense fully-connected network with reverse-mode gradients and
mask-aware weight matrices.

Layout conventions:
  - A weight matrix is stored (rows = fan-in, cols = fan-out) so a layer
    computes ``inputs @ values + bias``.
  - Layer ``skip_input_at`` reads ``concat(previous hidden, network input)``.
  - Hidden layers use ``hidden_activation``; the last layer uses
    ``output_activation`` (``none`` by default).
  - Parameters are float32; a float64 *shadow* copy (``Network.astype``) is
    only used by finite-difference checks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import ContractError

STORAGE_DTYPE = np.float32


class Activation(str, Enum):
    NONE = "none"
    RELU = "relu"


# ── Architecture ──────────────────────────────────────────────────

class NetworkSpec(BaseModel):
    """Architecture of one MLP. Invalid specs raise a validation error."""

    model_config = ConfigDict(frozen=True)

    layer_widths: Tuple[int, ...]
    skip_input_at: Optional[int] = None
    hidden_activation: Activation = Activation.RELU
    output_activation: Activation = Activation.NONE
    seed: int = 0

    @model_validator(mode="after")
    def _check_shape(self) -> "NetworkSpec":
        if len(self.layer_widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {list(self.layer_widths)}")
        n_layers = len(self.layer_widths) - 1
        if self.skip_input_at is not None and not (0 < self.skip_input_at < n_layers):
            raise ValueError(
                f"skip_input_at={self.skip_input_at} must be strictly interior (1..{n_layers - 1})"
            )
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def layer_shape(self, i: int) -> Tuple[int, int]:
        rows = self.layer_widths[i]
        if i == self.skip_input_at:
            rows += self.in_dim
        return rows, self.layer_widths[i + 1]


# ── Parameters ────────────────────────────────────────────────────

@dataclass
class MaskedMatrix:
    """Weight matrix + gradient buffer + keep-mask (True = trainable)."""

    values: np.ndarray
    grads: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, mask: Optional[np.ndarray] = None) -> "MaskedMatrix":
        values = np.array(values, copy=True)
        keep = np.ones(values.shape, dtype=bool) if mask is None else np.array(mask, dtype=bool)
        if keep.shape != values.shape:
            raise ContractError(f"mask shape {keep.shape} != values shape {values.shape}")
        return cls(values=values, grads=np.zeros_like(values), mask=keep)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> int:
        return self.values.size

    def apply_mask(self) -> None:
        """Force masked positions to +0.0 (in place)."""
        self.values[~self.mask] = 0.0

    def zero_grad(self) -> None:
        self.grads[...] = 0.0


@dataclass
class BiasVector:
    """Bias values + gradient buffer. Biases are never masked."""

    values: np.ndarray
    grads: np.ndarray

    mask = None

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grads[...] = 0.0


Parameter = Union[MaskedMatrix, BiasVector]


class ParameterContainer(Protocol):
    """Anything the optimizer, pruner and codec can walk."""

    def parameters(self) -> List[Parameter]: ...

    def weight_matrices(self) -> List[MaskedMatrix]: ...

    def layer_names(self) -> List[str]: ...

    def touch(self) -> None: ...


# ── Network ───────────────────────────────────────────────────────

@dataclass
class Network:
    spec: NetworkSpec
    weights: List[MaskedMatrix]
    biases: List[BiasVector]
    version: int = 0            # bumped on every parameter mutation

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].values.dtype

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def weight_matrices(self) -> List[MaskedMatrix]:
        return list(self.weights)

    def layer_names(self, prefix: str = "layer") -> List[str]:
        return [f"{prefix}.{i}" for i in range(len(self.weights))]

    def touch(self) -> None:
        self.version += 1

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def total_weights(self) -> int:
        return sum(w.size for w in self.weights)

    def mask_popcount(self) -> int:
        return int(sum(int(w.mask.sum()) for w in self.weights))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype: np.dtype) -> "Network":
        """Copy with parameters cast to ``dtype`` (finite-difference shadow)."""
        return Network(
            spec=self.spec,
            weights=[
                MaskedMatrix(w.values.astype(dtype), np.zeros(w.values.shape, dtype), w.mask.copy())
                for w in self.weights
            ],
            biases=[BiasVector(b.values.astype(dtype), np.zeros(b.values.shape, dtype)) for b in self.biases],
        )


@dataclass
class ActivationTape:
    """Intermediates of one forward pass, consumed by ``backward``."""

    network_id: int
    version: int
    batch_size: int
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def init_network(spec: NetworkSpec) -> Network:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.

    Deterministic for a fixed ``spec.seed``; every mask bit starts at 1.
    """
    rng = np.random.default_rng(spec.seed)
    weights: List[MaskedMatrix] = []
    biases: List[BiasVector] = []
    for i in range(spec.n_layers):
        rows, cols = spec.layer_shape(i)
        bound = np.sqrt(6.0 / rows)
        values = rng.uniform(-bound, bound, size=(rows, cols)).astype(STORAGE_DTYPE)
        weights.append(MaskedMatrix.from_values(values))
        biases.append(BiasVector(np.zeros(cols, STORAGE_DTYPE), np.zeros(cols, STORAGE_DTYPE)))
    return Network(spec=spec, weights=weights, biases=biases)


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0)
    return z


def _activation_grad(g: np.ndarray, z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return g * (z > 0)
    return g


def forward(net: Network, batch: np.ndarray) -> Tuple[np.ndarray, ActivationTape]:
    """Run a B×in_dim batch through the network, recording a tape."""
    x = np.asarray(batch, dtype=net.dtype)
    spec = net.spec
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ContractError(f"batch shape {x.shape} does not match input width {spec.in_dim}")

    tape = ActivationTape(network_id=id(net), version=net.version, batch_size=x.shape[0])
    h = x
    last = spec.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inp = np.concatenate([h, x], axis=1) if i == spec.skip_input_at else h
        z = inp @ w.values + b.values
        tape.layer_inputs.append(inp)
        tape.pre_activations.append(z)
        h = _activate(z, spec.output_activation if i == last else spec.hidden_activation)
    return h, tape


def backward(net: Network, tape: ActivationTape, out_grads: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; return d(loss)/d(input).

    Gradients at masked weight positions are forced to zero.
    """
    spec = net.spec
    if tape.network_id != id(net) or tape.version != net.version:
        raise ContractError("activation tape is stale or belongs to another network")
    g = np.asarray(out_grads, dtype=net.dtype)
    if g.shape != (tape.batch_size, spec.out_dim):
        raise ContractError(f"out_grads shape {g.shape} != {(tape.batch_size, spec.out_dim)}")

    d_input = np.zeros((tape.batch_size, spec.in_dim), dtype=net.dtype)
    last = spec.n_layers - 1
    for i in range(last, -1, -1):
        w, b = net.weights[i], net.biases[i]
        act = spec.output_activation if i == last else spec.hidden_activation
        g = _activation_grad(g, tape.pre_activations[i], act)
        w.grads += tape.layer_inputs[i].T @ g
        w.grads[~w.mask] = 0.0
        b.grads += g.sum(axis=0)
        g_in = g @ w.values.T
        if i == spec.skip_input_at:
            width = spec.layer_widths[i]
            d_input += g_in[:, width:]
            g = g_in[:, :width]
        else:
            g = g_in
    d_input += g
    return d_input


def batch_forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Forward without keeping the tape (inference)."""
    out, _ = forward(net, batch)
    return out


def weights_from_arrays(spec: NetworkSpec, arrays: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> Network:
    """Build a network around explicit parameter arrays (tests, decoding)."""
    if len(arrays) != spec.n_layers or len(biases) != spec.n_layers:
        raise ContractError("parameter count does not match the network spec")
    weights, bias_vectors = [], []
    for i, (w, b) in enumerate(zip(arrays, biases)):
        if tuple(np.shape(w)) != spec.layer_shape(i) or np.shape(b) != (spec.layer_widths[i + 1],):
            raise ContractError(f"layer {i} parameter shape mismatch")
        weights.append(MaskedMatrix.from_values(np.asarray(w, STORAGE_DTYPE)))
        b = np.array(b, dtype=STORAGE_DTYPE)
        bias_vectors.append(BiasVector(b, np.zeros_like(b)))
    return Network(spec=spec, weights=weights, biases=bias_vectors)
