"""
Experiment ledger: ``results.csv`` plus PSNR-vs-ratio and MSE-vs-ratio charts.

CSV columns (fixed order):
    dataset,seed,ratio,phase,psnr_mean_db,psnr_of_mean_mse_db,mse_mean,nominal_ratio,measured_ratio
Rows: the original model first, then pruned/retrained per ratio ascending.
Charts are SVG; each has one line per phase tagged ``series-pruned`` and
``series-retrained``, both starting from the original model at p = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from app.core.errors import ContractError, DatasetIOError  # noqa: E402
from app.evaluation.metrics import MetricsRecord, Phase  # noqa: E402

logger = logging.getLogger(__name__)

RESULTS_CSV = "results.csv"
PSNR_CHART = "psnr_vs_ratio.svg"
MSE_CHART = "mse_vs_ratio.svg"
COLUMNS = list(MetricsRecord.model_fields)
SERIES = (Phase.PRUNED, Phase.RETRAINED)

_PHASE_ORDER = {Phase.ORIGINAL: 0, Phase.PRUNED: 1, Phase.RETRAINED: 2}

plt.rcParams["svg.hashsalt"] = "scenecompress"
plt.rcParams["svg.fonttype"] = "none"


@dataclass
class ReportFiles:
    results_csv: Path
    psnr_chart: Path
    mse_chart: Path


def ordered(records: Sequence[MetricsRecord]) -> List[MetricsRecord]:
    return sorted(records, key=lambda r: (r.phase is not Phase.ORIGINAL, r.ratio, _PHASE_ORDER[r.phase]))


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = [{**r.model_dump(), "phase": r.phase.value} for r in ordered(records)]
    return pd.DataFrame(rows, columns=COLUMNS)


def read_results(path: str | Path) -> List[MetricsRecord]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return [MetricsRecord.model_validate(row) for row in frame.to_dict(orient="records")]


def _chart(records: Sequence[MetricsRecord], metric: str, ylabel: str, path: Path) -> None:
    original = [r for r in records if r.phase is Phase.ORIGINAL]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for phase in SERIES:
        series = sorted(original + [r for r in records if r.phase is phase], key=lambda r: r.ratio)
        ax.plot(
            [r.ratio for r in series],
            [getattr(r, metric) for r in series],
            marker="o",
            label=phase.value,
            gid=f"series-{phase.value}",
        )
    ax.set_xlabel("pruning ratio p")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise DatasetIOError(f"cannot write chart {path}: {exc}", path=str(path)) from exc
    finally:
        plt.close(fig)


def emit_report(records: Sequence[MetricsRecord], out_dir: str | Path) -> ReportFiles:
    if not records:
        raise ContractError("no metrics records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = ReportFiles(out / RESULTS_CSV, out / PSNR_CHART, out / MSE_CHART)
    try:
        records_frame(records).to_csv(files.results_csv, index=False, float_format="%.17g")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {files.results_csv}: {exc}", path=str(files.results_csv)) from exc
    _chart(records, "psnr_mean_db", "PSNR (dB)", files.psnr_chart)
    _chart(records, "mse_mean", "MSE", files.mse_chart)
    logger.info("Report written to %s (%d rows)", out, len(records), extra={"stage": "report"})
    return files
