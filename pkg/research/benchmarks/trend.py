"""
Research: trend reproduction on the synthetic benchmark.

Scores a finished pruning study against the expected shape of the
quality-vs-sparsity curve, checks that the ground-truth renderer has
converged, and sweeps seeds to see how stable the curve is.

Usage:
    result = run_experiment(RunConfig(seed=1), "runs/seed1")
    assessment = assess_trend(result)
    print(assessment.summary())

    frame = seed_sweep([1, 2, 3], "runs/sweep")
    frame.groupby(["phase", "ratio"]).psnr_mean_db.describe()
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from app.evaluation.metrics import SOFT_INVERSION_RATIO, MetricsRecord, Phase, mse, psnr, sorted_test_views
from app.evaluation.report import records_frame
from app.pipeline.experiment import ExperimentResult, GeometryRow, label, run_experiment
from app.pipeline.stages import RunConfig
from app.scene.dataset import DatasetManifest, oracle_config, render_oracle_views

logger = logging.getLogger(__name__)

MIN_ORIGINAL_PSNR_DB = 24.0
MIN_DROP_AT_HIGHEST_DB = 3.0
MIN_RECOVERY_AT_HIGHEST = 0.4
MAX_DEPTH_ERROR_GROWTH = 1.5
DEPTH_CHECK_RATIO = 0.3
MAX_ORACLE_GAP_DB = 0.5


@dataclass
class TrendAssessment:
    original_psnr: float = math.nan
    drop_at_highest: float = math.nan
    recovery_at_highest: float = math.nan
    depth_error_growth: float = math.nan
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "original_psnr_db": round(self.original_psnr, 3),
            "drop_at_highest_db": round(self.drop_at_highest, 3),
            "recovery_at_highest": round(self.recovery_at_highest, 4),
            "depth_error_growth": round(self.depth_error_growth, 4),
            "failures": list(self.failures),
        }


def _series(records: Sequence[MetricsRecord], phase: Phase) -> List[MetricsRecord]:
    return sorted((r for r in records if r.phase is phase), key=lambda r: r.ratio)


def assess_records(records: Sequence[MetricsRecord],
                   geometry: Optional[Sequence[GeometryRow]] = None) -> TrendAssessment:
    """Check a ledger against the expected curve.

    The original model must reach ``MIN_ORIGINAL_PSNR_DB``; pruned-only PSNR
    may rise with p only at p = 0.3; the highest ratio must cost at least
    ``MIN_DROP_AT_HIGHEST_DB``; retraining must never hurt and must win back
    ``MIN_RECOVERY_AT_HIGHEST`` of the drop at the highest ratio.
    """
    out = TrendAssessment()
    original = [r for r in records if r.phase is Phase.ORIGINAL]
    pruned = _series(records, Phase.PRUNED)
    retrained = {r.ratio: r for r in _series(records, Phase.RETRAINED)}
    if len(original) != 1 or not pruned:
        out.failures.append("ledger needs one original row and at least one pruned row")
        return out

    base = original[0].psnr_mean_db
    out.original_psnr = base
    if base < MIN_ORIGINAL_PSNR_DB:
        out.failures.append(f"original PSNR {base:.2f} dB < {MIN_ORIGINAL_PSNR_DB} dB")

    prev = base
    for r in pruned:
        if r.psnr_mean_db > prev and not math.isclose(r.ratio, SOFT_INVERSION_RATIO):
            out.failures.append(f"pruned PSNR rises at p={r.ratio:.2f} ({prev:.2f} -> {r.psnr_mean_db:.2f} dB)")
        prev = r.psnr_mean_db

    highest = pruned[-1]
    out.drop_at_highest = base - highest.psnr_mean_db
    if out.drop_at_highest < MIN_DROP_AT_HIGHEST_DB:
        out.failures.append(f"p={highest.ratio:.2f} costs only {out.drop_at_highest:.2f} dB")

    for r in pruned:
        tuned = retrained.get(r.ratio)
        if tuned is None:
            out.failures.append(f"no retrained row at p={r.ratio:.2f}")
        elif tuned.psnr_mean_db < r.psnr_mean_db:
            out.failures.append(f"retraining lowers PSNR at p={r.ratio:.2f}")

    tuned = retrained.get(highest.ratio)
    if tuned is not None and out.drop_at_highest > 0:
        out.recovery_at_highest = (tuned.psnr_mean_db - highest.psnr_mean_db) / out.drop_at_highest
        if out.recovery_at_highest < MIN_RECOVERY_AT_HIGHEST:
            out.failures.append(f"retraining recovers {out.recovery_at_highest:.0%} of the drop at "
                                f"p={highest.ratio:.2f}")

    if geometry:
        by_label = {g.label: g for g in geometry}
        base_row = by_label.get(label(Phase.ORIGINAL))
        tuned_row = by_label.get(label(Phase.RETRAINED, DEPTH_CHECK_RATIO))
        if base_row and tuned_row and base_row.depth_mae > 0:
            out.depth_error_growth = tuned_row.depth_mae / base_row.depth_mae
            if out.depth_error_growth > MAX_DEPTH_ERROR_GROWTH:
                out.failures.append(
                    f"retrained p={DEPTH_CHECK_RATIO:.2f} depth error is {out.depth_error_growth:.2f}x the original's"
                )
    return out


def assess_trend(result: ExperimentResult) -> TrendAssessment:
    assessment = assess_records(result.records, result.geometry)
    level = logging.INFO if assessment.ok else logging.WARNING
    logger.log(level, "Trend assessment: %s", assessment.summary())
    return assessment


def oracle_gap_db(manifest: DatasetManifest, n_samples: int = 64, low: int = 8, high: int = 16,
                  threads: Optional[int] = None) -> float:
    """Shift in the mean test PSNR of a plain ``n_samples`` render when the
    ground truth moves from ``low``× to ``high``× sample density."""
    views = sorted_test_views(manifest)
    plain = render_oracle_views(manifest, views, oracle_config(n_samples, 1), threads)
    scores = []
    for factor in (low, high):
        truth = render_oracle_views(manifest, views, oracle_config(n_samples, factor), threads)
        scores.append(sum(psnr(mse(a, b)) for a, b in zip(plain, truth)) / len(views))
    return abs(scores[0] - scores[1])


def seed_sweep(seeds: Sequence[int], out_root: str | Path, threads: Optional[int] = None,
               **overrides: Any) -> pd.DataFrame:
    """Run one experiment per seed under ``out_root/seed<k>``; return the stacked ledgers."""
    frames = []
    for seed in seeds:
        result = run_experiment(RunConfig(seed=seed, **overrides), Path(out_root) / f"seed{seed}", threads)
        frame = records_frame(result.records)
        frame["trend_ok"] = assess_trend(result).ok
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
