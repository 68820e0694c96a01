"""
One-shot magnitude pruning.

All weight matrices (biases excluded) are walked in a fixed order (trunk
layers, then head layers; row-major inside each) and ranked by stored
|value|. Already-masked slots rank first, so re-applying the same ratio is a
no-op. Ties break on the flattened index (lower index pruned first), and
exactly floor(p·N) weights go.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core import prometheus_metrics as prom
from app.core.config import settings
from app.core.errors import ConfigurationError, DatasetIOError
from app.core.monitoring import gauge
from app.mlp.network import MaskedMatrix, ParameterContainer

logger = logging.getLogger(__name__)


class PruneScope(str, Enum):
    GLOBAL = "global"          # one threshold for every matrix
    LAYERWISE = "layerwise"    # floor(p·N_l) per matrix


class TiePolicy(str, Enum):
    STABLE_INDEX = "stable_index"


class PruneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    ratio: float = Field(ge=0.0, lt=1.0)
    scope: PruneScope = Field(default_factory=lambda: PruneScope(settings.prune_scope))
    tie_policy: TiePolicy = TiePolicy.STABLE_INDEX


@dataclass
class LayerCounts:
    name: str
    kept: int
    pruned: int


@dataclass
class PruneReport:
    ratio: float
    scope: str
    total_weights: int
    pruned_count: int
    threshold: float
    layers: List[LayerCounts] = field(default_factory=list)

    @property
    def kept_count(self) -> int:
        return self.total_weights - self.pruned_count

    @property
    def nominal_compression(self) -> float:
        return self.total_weights / self.kept_count

    def to_dict(self) -> dict:
        out = asdict(self)
        out["nominal_compression"] = self.nominal_compression
        return out

    def write_json(self, path: str | Path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(f"cannot write prune report {path}: {exc}", path=str(path)) from exc


def check_ratio(p: float) -> None:
    if not (0.0 <= p < 1.0) or math.isnan(p):
        raise ConfigurationError(f"pruning ratio must lie in [0, 1), got {p}")


def prune_count(p: float, n: int) -> int:
    """floor(p·N) in exact decimal arithmetic; ``0.7 * 90`` is 62.999... in floats."""
    return math.floor(Fraction(str(p)) * n)


def ranking_keys(matrices: List[MaskedMatrix]) -> np.ndarray:
    """Flattened magnitudes with masked slots forced below every live weight."""
    return np.concatenate([
        np.where(w.mask, np.abs(w.values.astype(np.float64)), -1.0).ravel() for w in matrices
    ])


def _select(keys: np.ndarray, k: int) -> Tuple[np.ndarray, float]:
    order = np.argsort(keys, kind="stable")
    chosen = order[:k]
    threshold = float(max(keys[order[k - 1]], 0.0)) if k > 0 else 0.0
    return chosen, threshold


def global_threshold(net: ParameterContainer, p: float) -> Tuple[float, int]:
    """k = floor(p·N) and the k-th smallest magnitude (exact order statistic)."""
    check_ratio(p)
    keys = ranking_keys(net.weight_matrices())
    k = prune_count(p, keys.size)
    return _select(keys, k)[1], k


def prune_selection(net: ParameterContainer, cfg: PruneConfig) -> Tuple[List[np.ndarray], float]:
    """Per-matrix boolean arrays of the slots to prune, plus the threshold."""
    check_ratio(cfg.ratio)
    matrices = net.weight_matrices()
    if cfg.scope is PruneScope.GLOBAL:
        keys = ranking_keys(matrices)
        chosen, threshold = _select(keys, prune_count(cfg.ratio, keys.size))
        flat = np.zeros(keys.size, dtype=bool)
        flat[chosen] = True
        sizes = np.cumsum([w.size for w in matrices])[:-1]
        parts = np.split(flat, sizes)
        return [part.reshape(w.values.shape) for part, w in zip(parts, matrices)], threshold

    selections, threshold = [], 0.0
    for w in matrices:
        keys = ranking_keys([w])
        chosen, layer_threshold = _select(keys, prune_count(cfg.ratio, keys.size))
        flat = np.zeros(keys.size, dtype=bool)
        flat[chosen] = True
        selections.append(flat.reshape(w.values.shape))
        threshold = max(threshold, layer_threshold)
    return selections, threshold


def apply_prune(net: ParameterContainer, cfg: PruneConfig) -> PruneReport:
    """Clear mask bits and zero values of the selected weights (in place)."""
    selections, threshold = prune_selection(net, cfg)
    matrices = net.weight_matrices()
    layers = []
    for name, w, sel in zip(net.layer_names(), matrices, selections):
        w.mask[sel] = False
        w.apply_mask()
        pruned = int(w.size - w.mask.sum())
        layers.append(LayerCounts(name=name, kept=w.size - pruned, pruned=pruned))
    net.touch()

    total = sum(w.size for w in matrices)
    report = PruneReport(
        ratio=cfg.ratio,
        scope=cfg.scope.value,
        total_weights=total,
        pruned_count=sum(layer.pruned for layer in layers),
        threshold=threshold,
        layers=layers,
    )
    prom.model_sparsity.set(report.pruned_count / total)
    gauge("model_sparsity", report.pruned_count / total)
    logger.info(
        "Pruned %d/%d weights (p=%.2f, %s, threshold %.6g, nominal x%.2f)",
        report.pruned_count, total, cfg.ratio, cfg.scope.value, threshold, report.nominal_compression,
        extra={"stage": "prune", "ratio": cfg.ratio},
    )
    for layer in layers:
        logger.debug("  %-8s kept %6d pruned %6d", layer.name, layer.kept, layer.pruned)
    return report


def verify_sparsity(net: ParameterContainer) -> Tuple[float, int]:
    """(fraction masked, count of masked slots holding a nonzero value)."""
    matrices = net.weight_matrices()
    total = sum(w.size for w in matrices)
    masked = sum(int((~w.mask).sum()) for w in matrices)
    violations = sum(int(np.count_nonzero(w.values[~w.mask])) for w in matrices)
    return (masked / total if total else 0.0), violations
