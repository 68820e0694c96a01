"""
Bias-corrected adaptive first-order optimizer (Adam) for masked parameters.

One configuration serves both the initial training and the post-pruning
retraining; retraining starts from a fresh state (zeroed moments).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core import prometheus_metrics as prom
from app.core.config import settings
from app.core.errors import ContractError, NumericError
from app.core.monitoring import inc
from app.mlp.network import ParameterContainer

logger = logging.getLogger(__name__)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default_factory=lambda: settings.lr, ge=0.0)
    beta1: float = Field(default_factory=lambda: settings.beta1, ge=0.0, lt=1.0)
    beta2: float = Field(default_factory=lambda: settings.beta2, ge=0.0, lt=1.0)
    eps: float = Field(default_factory=lambda: settings.eps, gt=0.0)


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)


def init_optimizer(model: ParameterContainer, config: OptimizerConfig | None = None) -> OptimizerState:
    """Fresh state with zeroed moment buffers matching every parameter."""
    cfg = config or OptimizerConfig()
    params = model.parameters()
    return OptimizerState(
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        first=[np.zeros_like(p.values) for p in params],
        second=[np.zeros_like(p.values) for p in params],
    )


def optimizer_step(model: ParameterContainer, opt: OptimizerState) -> None:
    """Apply one update to unmasked parameters, then clear gradients.

    Masked weights stay exactly +0.0. Every update is computed and checked
    before any parameter or moment is written, so a non-finite step raises
    with the model and the state untouched.
    """
    params = model.parameters()
    if len(params) != len(opt.first):
        raise ContractError("optimizer state does not match the model's parameters")

    step = opt.step + 1
    bc1 = 1.0 - opt.beta1 ** step
    bc2 = 1.0 - opt.beta2 ** step
    staged = []
    for p, m, v in zip(params, opt.first, opt.second):
        g = p.grads
        m_new = opt.beta1 * m + (1.0 - opt.beta1) * g
        v_new = opt.beta2 * v + (1.0 - opt.beta2) * np.square(g)
        update = opt.lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + opt.eps)
        if not np.all(np.isfinite(update)):
            raise NumericError(f"non-finite optimizer update at step {step}", iteration=step)
        staged.append((m_new, v_new, update))

    for p, m, v, (m_new, v_new, update) in zip(params, opt.first, opt.second, staged):
        m[...] = m_new
        v[...] = v_new
        p.values -= update.astype(p.values.dtype, copy=False)
        if p.mask is not None:
            p.values[~p.mask] = 0.0
        p.grads[...] = 0.0
    opt.step = step

    model.touch()
    inc("optimizer_steps")
    prom.optimizer_steps_total.inc()
