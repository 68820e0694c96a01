"""
The full pruning experiment and its run manifest.

Output layout under ``--out``:
    run_manifest.json                    written before any computation
    dataset/                             manifest.txt + images/
    models/original.nrfp                 (+ .train.csv)
    models/pruned_p0.30.nrfp             (+ .prune.json)
    models/retrained_p0.30.nrfp          (+ .train.csv)
    renders/<label>/view_XXXX.ppm        first test view of every model
    depth/<label>/view_XXXX.depth|.pgm   every test view of every model
    meshes/<label>.obj
    results.csv, psnr_vs_ratio.svg, mse_vs_ratio.svg
    geometry.csv                         depth error and mesh size per model
    metrics.prom                         prometheus dump (not reproducible)

Everything except the manifest timestamps, train-log timings and
``metrics.prom`` is a pure function of the config snapshot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from app.compression.codec import compression_summary
from app.core.config import TOOL_VERSION
from app.core.errors import ConfigurationError, DatasetIOError, ManifestError
from app.core.monitoring import get_counters, log_stage_metrics
from app.core.prometheus_metrics import timed_stage, write_textfile
from app.evaluation.metrics import MetricsRecord, Phase, TrendCheck, check_trend, make_record
from app.evaluation.report import ReportFiles, emit_report
from app.pipeline.stages import (
    MODEL_SUFFIX,
    DatasetHandle,
    RunConfig,
    depth_stage,
    eval_stage,
    gen_scene,
    mesh_stage,
    prune_stage,
    render_stage,
    retrain_stage,
    train_stage,
)
from app.render.renderer import RENDER_STREAM, resolve_threads
from app.scene.dataset import CAMERA_STREAM
from app.training.trainer import RETRAIN_STREAM, TRAIN_STREAM

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"
DATASET_NAME = "benchmark"
GEOMETRY_CSV = "geometry.csv"
METRICS_FILE = "metrics.prom"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest(BaseModel):
    """What was run, with which parameters, reading and writing what."""

    tool_version: str = TOOL_VERSION
    command: str
    config: RunConfig
    streams: Dict[str, int] = Field(default_factory=lambda: {
        "render": RENDER_STREAM, "train": TRAIN_STREAM, "retrain": RETRAIN_STREAM, "camera": CAMERA_STREAM,
    })
    threads: int = 0
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started_at: str = Field(default_factory=_now)
    finished_at: Optional[str] = None

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(f"cannot write run manifest {path}: {exc}", path=str(path)) from exc
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / RUN_MANIFEST
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DatasetIOError(f"cannot read run manifest {path}: {exc}", path=str(path)) from exc
        except ValidationError as exc:
            raise ManifestError(f"{path}: not a run manifest\n{exc}", path=str(path)) from exc


def run_manifest_path(out: str | Path) -> Path:
    """``<dir>/run_manifest.json`` for directory outputs, ``<file>.run.json`` otherwise."""
    out = Path(out)
    if out.suffix and not out.is_dir():
        return out.with_name(f"{out.name}.run.json")
    return out / RUN_MANIFEST


def start_run(command: str, cfg: RunConfig, out: str | Path, threads: Optional[int] = None,
              inputs: Optional[Dict[str, str]] = None) -> RunManifest:
    manifest = RunManifest(
        command=command, config=cfg, threads=threads or 0,
        inputs={k: str(v) for k, v in (inputs or {}).items()},
        outputs={"root": str(out)},
    )
    manifest.write(run_manifest_path(out))
    logger.info("Run manifest for %s written to %s", command, run_manifest_path(out), extra={"stage": command})
    return manifest


def finish_run(manifest: RunManifest, out: str | Path, outputs: Optional[Dict[str, str]] = None) -> RunManifest:
    done = manifest.model_copy(update={
        "outputs": {**manifest.outputs, **{k: str(v) for k, v in (outputs or {}).items()}},
        "finished_at": _now(),
    })
    done.write(run_manifest_path(out))
    return done


# ── Layout ────────────────────────────────────────────────────────

def label(phase: Phase, ratio: float = 0.0) -> str:
    return phase.value if phase is Phase.ORIGINAL else f"{phase.value}_p{ratio:.2f}"


@dataclass
class ExperimentLayout:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}{MODEL_SUFFIX}"

    def renders(self, name: str) -> Path:
        return self.root / "renders" / name

    def depth(self, name: str) -> Path:
        return self.root / "depth" / name

    def mesh(self, name: str) -> Path:
        return self.root / "meshes" / f"{name}.obj"


@dataclass
class GeometryRow:
    label: str
    phase: str
    ratio: float
    depth_mae: float
    mesh_vertices: int
    mesh_faces: int


@dataclass
class ExperimentResult:
    records: List[MetricsRecord]
    trend: TrendCheck
    report: ReportFiles
    geometry: List[GeometryRow] = field(default_factory=list)
    manifest: Optional[RunManifest] = None

    def record(self, phase: Phase, ratio: float = 0.0) -> MetricsRecord:
        for r in self.records:
            if r.phase is phase and (phase is Phase.ORIGINAL or r.ratio == ratio):
                return r
        raise KeyError(f"no {phase.value} record at p={ratio}")

    def geometry_row(self, phase: Phase, ratio: float = 0.0) -> GeometryRow:
        name = label(phase, ratio)
        return next(g for g in self.geometry if g.label == name)


def write_geometry(rows: List[GeometryRow], path: Path) -> None:
    frame = pd.DataFrame([vars(r) for r in rows],
                         columns=["label", "phase", "ratio", "depth_mae", "mesh_vertices", "mesh_faces"])
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}", path=str(path)) from exc


# ── Driver ────────────────────────────────────────────────────────

class _Experiment:
    def __init__(self, cfg: RunConfig, layout: ExperimentLayout, threads: Optional[int]) -> None:
        self.cfg = cfg
        self.layout = layout
        self.threads = threads
        self.records: List[MetricsRecord] = []
        self.geometry: List[GeometryRow] = []
        self.data: Optional[DatasetHandle] = None

    def evaluate(self, model: Path, phase: Phase, ratio: float, nominal: float, measured: float) -> None:
        result = eval_stage(self.cfg, self.data, model, self.threads)
        self.records.append(make_record(result, DATASET_NAME, self.cfg.seed, ratio, phase, nominal, measured))

    def artifacts(self, model: Path, phase: Phase, ratio: float) -> None:
        name = label(phase, ratio)
        render_stage(self.cfg, self.data, model, self.layout.renders(name), self.data.test_views[:1], self.threads)
        depth = depth_stage(self.cfg, self.data, model, self.layout.depth(name), self.threads)
        mesh = mesh_stage(self.cfg, model, self.layout.mesh(name), self.data.manifest.scene.bounds_radius,
                          self.threads)
        self.geometry.append(GeometryRow(name, phase.value, ratio, depth.mae, mesh.n_vertices, mesh.n_faces))

    def run(self) -> None:
        cfg, layout = self.cfg, self.layout
        gen_scene(cfg, layout.dataset, self.threads)
        self.data = DatasetHandle.open(layout.dataset)

        original = layout.model(label(Phase.ORIGINAL))
        _, _, size = train_stage(cfg, self.data, original, self.threads)
        self.evaluate(original, Phase.ORIGINAL, 0.0, 1.0, size.measured_ratio)
        self.artifacts(original, Phase.ORIGINAL, 0.0)

        for ratio in cfg.ratios:
            pruned = layout.model(label(Phase.PRUNED, ratio))
            _, prune_report, size = prune_stage(cfg, original, ratio, pruned)
            summary = compression_summary(prune_report, size)
            self.evaluate(pruned, Phase.PRUNED, ratio, summary.nominal_ratio, summary.measured_ratio)
            self.artifacts(pruned, Phase.PRUNED, ratio)

            retrained = layout.model(label(Phase.RETRAINED, ratio))
            if prune_report.pruned_count == 0:
                logger.warning("p=%.2f prunes nothing; retrained model equals the original", ratio,
                               extra={"ratio": ratio})
                retrained.write_bytes(pruned.read_bytes())
            else:
                _, _, size = retrain_stage(cfg, self.data, pruned, retrained, self.threads)
            self.evaluate(retrained, Phase.RETRAINED, ratio, summary.nominal_ratio, size.measured_ratio)
            self.artifacts(retrained, Phase.RETRAINED, ratio)


def run_experiment(cfg: RunConfig, out_dir: str | Path, threads: Optional[int] = None) -> ExperimentResult:
    """Train, prune at every ratio, retrain, and report.

    Ledger trend violations are logged, never raised.
    """
    out = Path(out_dir)
    layout = ExperimentLayout(out)
    manifest = start_run("experiment", cfg, out, threads)
    logger.info(
        "Experiment seed=%d ratios=%s (%d threads) → %s", cfg.seed, cfg.ratios, resolve_threads(threads), out,
        extra={"stage": "experiment"},
    )

    exp = _Experiment(cfg, layout, threads)
    with timed_stage("experiment"):
        exp.run()
        report = emit_report(exp.records, out)
        write_geometry(exp.geometry, out / GEOMETRY_CSV)

    trend = check_trend(exp.records)
    for msg in trend.warnings:
        logger.warning("Trend: %s", msg, extra={"stage": "experiment"})
    for msg in trend.failures:
        logger.error("Trend violated: %s", msg, extra={"stage": "experiment"})

    log_stage_metrics("experiment")
    write_textfile(str(out / METRICS_FILE))
    logger.debug("Counters: %s", get_counters())
    manifest = finish_run(manifest, out, {
        "results": report.results_csv, "psnr_chart": report.psnr_chart, "mse_chart": report.mse_chart,
        "geometry": out / GEOMETRY_CSV, "dataset": layout.dataset,
    })
    return ExperimentResult(exp.records, trend, report, exp.geometry, manifest)


def replay_experiment(manifest_file: str | Path, out_dir: Optional[str | Path] = None,
                      threads: Optional[int] = None) -> ExperimentResult:
    """Re-run the experiment recorded in a run manifest."""
    recorded = RunManifest.read(manifest_file)
    if recorded.command != "experiment":
        raise ConfigurationError(f"only experiment runs can be replayed, manifest records {recorded.command!r}")
    if recorded.tool_version != TOOL_VERSION:
        logger.warning("Replaying a %s manifest with %s", recorded.tool_version, TOOL_VERSION)
    out = out_dir or recorded.outputs.get("root")
    if out is None:
        raise ConfigurationError("run manifest names no output directory; pass --out")
    return run_experiment(recorded.config, out, threads if threads is not None else recorded.threads)
