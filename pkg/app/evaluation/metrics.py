"""
Image quality metrics and model evaluation on the held-out views.

Metrics are computed against float renders of the analytic oracle, not the
8-bit files on disk. Two aggregations are reported for every evaluation:
the mean of per-view PSNR (primary) and the PSNR of the mean MSE.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core import prometheus_metrics as prom
from app.core.errors import ContractError
from app.render.renderer import Scene, render_image
from app.render.volume import SamplingConfig
from app.scene.dataset import DatasetManifest, ViewRecord, render_oracle_views

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    ORIGINAL = "original"
    PRUNED = "pruned"
    RETRAINED = "retrained"


class MetricsRecord(BaseModel):
    """One ledger row (pruning ratio × phase)."""

    model_config = ConfigDict(frozen=True)

    dataset: str
    seed: int
    ratio: float
    phase: Phase
    psnr_mean_db: float
    psnr_of_mean_mse_db: float
    mse_mean: float
    nominal_ratio: float
    measured_ratio: float


# ── Metrics ───────────────────────────────────────────────────────

def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(a - b)))


def psnr(mse_value: float) -> float:
    """−10·log10(mse) for unit-range signals; +inf at mse 0."""
    if mse_value < 0:
        raise ContractError(f"mse must be >= 0, got {mse_value}")
    if mse_value == 0:
        return math.inf
    return -10.0 * math.log10(mse_value)


OPAQUE_THRESHOLD = 0.5


def depth_mae(depth: np.ndarray, oracle_depth: np.ndarray, oracle_opacity: np.ndarray,
              threshold: float = OPAQUE_THRESHOLD) -> float:
    """Mean |depth − oracle depth| over pixels the oracle sees as opaque; NaN if none."""
    depth = np.asarray(depth, dtype=np.float64)
    oracle_depth = np.asarray(oracle_depth, dtype=np.float64)
    if depth.shape != oracle_depth.shape or depth.shape != np.shape(oracle_opacity):
        raise ContractError(f"depth shapes differ: {depth.shape}, {oracle_depth.shape}, {np.shape(oracle_opacity)}")
    opaque = np.asarray(oracle_opacity) > threshold
    if not opaque.any():
        return math.nan
    return float(np.mean(np.abs(depth[opaque] - oracle_depth[opaque])))


# ── Evaluation ────────────────────────────────────────────────────

@dataclass
class EvaluationResult:
    view_names: List[str]
    view_mse: List[float]
    view_psnr: List[float]
    seconds: float = 0.0

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.view_mse))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.view_psnr))

    @property
    def psnr_of_mean_mse(self) -> float:
        return psnr(self.mse_mean)


def sorted_test_views(manifest: DatasetManifest) -> List[ViewRecord]:
    views = sorted(manifest.test_views, key=lambda v: v.image)
    if not views:
        raise ContractError("dataset has no test views")
    return views


def oracle_targets(manifest: DatasetManifest, threads: Optional[int] = None,
                   cfg: Optional[SamplingConfig] = None) -> List[np.ndarray]:
    """Float ground truth of the test views, in evaluation order."""
    return render_oracle_views(manifest, sorted_test_views(manifest), cfg, threads)


def evaluate_model(
    model: Scene,
    manifest: DatasetManifest,
    cfg: SamplingConfig,
    targets: Optional[Sequence[np.ndarray]] = None,
    threads: Optional[int] = None,
) -> EvaluationResult:
    """Render every test view and score it against the float oracle.

    Views are processed in image-name order, so the result does not depend
    on how the manifest lists them. ``targets`` (from ``oracle_targets``)
    skips re-rendering the oracle.
    """
    views = sorted_test_views(manifest)
    if targets is None:
        targets = oracle_targets(manifest, threads)
    if len(targets) != len(views):
        raise ContractError(f"{len(targets)} targets for {len(views)} test views")

    start = time.perf_counter()
    names, errors = [], []
    for view, target in zip(views, targets):
        image, _, _ = render_image(model, view.camera, cfg, manifest.near, manifest.far,
                                   threads=threads, purpose="eval")
        names.append(view.image)
        errors.append(mse(image, target))
    elapsed = time.perf_counter() - start
    result = EvaluationResult(names, errors, [psnr(e) for e in errors], elapsed)
    prom.stage_duration_seconds.labels(stage="eval_render").observe(elapsed)
    return result


def make_record(
    result: EvaluationResult,
    dataset: str,
    seed: int,
    ratio: float,
    phase: Phase,
    nominal_ratio: float,
    measured_ratio: float,
) -> MetricsRecord:
    record = MetricsRecord(
        dataset=dataset,
        seed=seed,
        ratio=ratio,
        phase=phase,
        psnr_mean_db=result.psnr_mean,
        psnr_of_mean_mse_db=result.psnr_of_mean_mse,
        mse_mean=result.mse_mean,
        nominal_ratio=nominal_ratio,
        measured_ratio=measured_ratio,
    )
    prom.last_psnr_db.labels(phase=phase.value).set(record.psnr_mean_db)
    logger.info(
        "%s p=%.2f: PSNR %.3f dB (of mean MSE %.3f dB), MSE %.6f, render %.0f ms",
        phase.value, ratio, record.psnr_mean_db, record.psnr_of_mean_mse_db, record.mse_mean,
        result.seconds * 1000,
        extra={"phase": phase.value, "ratio": ratio, "psnr": record.psnr_mean_db,
               "latency_ms": round(result.seconds * 1000, 1)},
    )
    return record


# ── Ledger trend ──────────────────────────────────────────────────

SOFT_INVERSION_RATIO = 0.3


@dataclass
class TrendCheck:
    warnings: List[str]
    failures: List[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _inversions(points: List[Tuple[float, float]], worse_is_lower: bool) -> List[Tuple[float, float, float]]:
    """(ratio, previous value, value) wherever quality improves as p grows."""
    out = []
    for (_, prev), (p, cur) in zip(points, points[1:]):
        improved = cur > prev if worse_is_lower else cur < prev
        if improved:
            out.append((p, prev, cur))
    return out


def check_trend(records: Sequence[MetricsRecord]) -> TrendCheck:
    """Within each phase PSNR must not rise and MSE must not fall with p.

    The original model is the p = 0 point of both series. An inversion at
    p = 0.3 is a warning; anywhere else it is a failure.
    """
    original = [r for r in records if r.phase is Phase.ORIGINAL]
    warnings, failures = [], []
    for phase in (Phase.PRUNED, Phase.RETRAINED):
        series = sorted(original + [r for r in records if r.phase is phase], key=lambda r: r.ratio)
        for metric, worse_is_lower in (("psnr_mean_db", True), ("mse_mean", False)):
            points = [(r.ratio, getattr(r, metric)) for r in series]
            for p, prev, cur in _inversions(points, worse_is_lower):
                msg = f"{phase.value} {metric} improves at p={p:.2f} ({prev:.6g} -> {cur:.6g})"
                (warnings if math.isclose(p, SOFT_INVERSION_RATIO) else failures).append(msg)
    return TrendCheck(warnings=warnings, failures=failures)
