"""
Pipeline stages.

Every stage reads its inputs from disk and writes its outputs to disk
(dataset directory, model files, images, meshes), so each one can be re-run
on its own from the CLI. The experiment driver chains them.

Artifact naming next to a model file ``<name>.nrfp``:
    <name>.train.csv     training / retraining log
    <name>.prune.json    prune report (pruned models only)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.compression.codec import ByteReport, load_field, save
from app.compression.pruner import PruneConfig, PruneReport, PruneScope, apply_prune, check_ratio
from app.core.config import settings
from app.core.errors import ContractError, DatasetIOError
from app.core.monitoring import log_stage_metrics
from app.core.prometheus_metrics import timed_stage
from app.evaluation.metrics import EvaluationResult, depth_mae, evaluate_model, oracle_targets, sorted_test_views
from app.field.encoding import EncodingConfig
from app.field.model import RadianceField, build_field
from app.geometry.export import export_depth, export_mesh
from app.geometry.grid import cube_bounds, sample_density_grid
from app.geometry.marching_cubes import TriangleMesh, extract_mesh
from app.mlp.optimizer import OptimizerConfig
from app.render.renderer import render_image
from app.render.volume import SamplingConfig
from app.scene.analytic import benchmark_scene
from app.scene.dataset import (
    DatasetManifest,
    ViewRecord,
    generate_dataset,
    load_manifest,
    manifest_path,
    oracle_config,
    render_oracle,
)
from app.scene.images import write_image
from app.training.trainer import TrainConfig, TrainingRays, TrainLog, retrain, train

logger = logging.getLogger(__name__)

MODEL_SUFFIX = ".nrfp"

ModelSource = Union[str, Path, RadianceField]


class RunConfig(BaseModel):
    """Every parameter that influences a run's artifacts.

    ``threads`` is deliberately absent: outputs do not depend on it.
    """

    model_config = ConfigDict(frozen=True)

    seed: int = Field(default_factory=lambda: settings.seed)

    # scene
    resolution: int = Field(default_factory=lambda: settings.resolution, ge=1)
    n_train_views: int = Field(default_factory=lambda: settings.n_train_views, ge=1)
    n_test_views: int = Field(default_factory=lambda: settings.n_test_views, ge=1)

    # field
    hidden_width: int = Field(default_factory=lambda: settings.hidden_width, ge=1)
    hidden_layers: int = Field(default_factory=lambda: settings.hidden_layers, ge=1)
    skip_input_at: int = Field(default_factory=lambda: settings.skip_input_at, ge=0)
    head_width: int = Field(default_factory=lambda: settings.head_width, ge=1)
    l_pos: int = Field(default_factory=lambda: settings.l_pos, ge=1)
    l_dir: int = Field(default_factory=lambda: settings.l_dir, ge=0)
    include_identity: bool = Field(default_factory=lambda: settings.include_identity)

    # sampling
    n_samples: int = Field(default_factory=lambda: settings.n_samples, ge=2)
    oracle_supersample: int = Field(default_factory=lambda: settings.oracle_supersample, ge=1)
    white_background: bool = Field(default_factory=lambda: settings.white_background)

    # training
    iterations: int = Field(default_factory=lambda: settings.iterations, ge=1)
    retrain_iterations: int = Field(default_factory=lambda: settings.retrain_iterations, ge=0)
    rays_per_batch: int = Field(default_factory=lambda: settings.rays_per_batch, ge=1)
    eval_every: int = Field(default_factory=lambda: settings.eval_every, ge=0)
    lr: float = Field(default_factory=lambda: settings.lr, ge=0.0)
    beta1: float = Field(default_factory=lambda: settings.beta1, ge=0.0, lt=1.0)
    beta2: float = Field(default_factory=lambda: settings.beta2, ge=0.0, lt=1.0)
    eps: float = Field(default_factory=lambda: settings.eps, gt=0.0)

    # pruning
    ratios: List[float] = Field(default_factory=lambda: list(settings.prune_ratios))
    scope: PruneScope = Field(default_factory=lambda: PruneScope(settings.prune_scope))

    # geometry
    iso_level: float = Field(default_factory=lambda: settings.iso_level, gt=0.0)
    grid_resolution: int = Field(default_factory=lambda: settings.mesh_grid_resolution, ge=2)

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v: List[float]) -> List[float]:
        for p in v:
            check_ratio(p)
            if p == 0.0:
                raise ValueError("ratio 0 is the original model; list only ratios in (0, 1)")
        return sorted(set(v))

    # ── Derived configs ──────────────────────────────────────────

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(l_pos=self.l_pos, l_dir=self.l_dir, include_identity=self.include_identity)

    def new_field(self) -> RadianceField:
        return build_field(
            self.seed, self.encoding(),
            hidden_width=self.hidden_width, hidden_layers=self.hidden_layers,
            skip_input_at=self.skip_input_at, head_width=self.head_width,
        )

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(n_samples=self.n_samples, stratified=True, seed=self.seed,
                              white_background=self.white_background)

    def evaluation_sampling(self) -> SamplingConfig:
        return self.sampling().evaluation()

    def oracle(self) -> SamplingConfig:
        return oracle_config(self.n_samples, self.oracle_supersample, self.white_background)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            rays_per_batch=self.rays_per_batch,
            retrain_iterations=self.retrain_iterations,
            eval_every=self.eval_every,
            seed=self.seed,
            optimizer=OptimizerConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps),
            sampling=self.sampling(),
        )

    def prune_config(self, ratio: float) -> PruneConfig:
        return PruneConfig(ratio=ratio, scope=self.scope)


# ── Dataset handle ────────────────────────────────────────────────

@dataclass
class DatasetHandle:
    """A dataset on disk plus lazily rendered float ground truth of its test views."""

    root: Path
    manifest: DatasetManifest
    _targets: Optional[List[np.ndarray]] = field(default=None, repr=False)
    _depths: Optional[List[Tuple[np.ndarray, np.ndarray]]] = field(default=None, repr=False)

    @classmethod
    def open(cls, path: str | Path) -> "DatasetHandle":
        manifest = load_manifest(path)
        return cls(root=manifest_path(path).parent, manifest=manifest)

    @property
    def test_views(self) -> List[ViewRecord]:
        return sorted_test_views(self.manifest)

    def targets(self, cfg: RunConfig, threads: Optional[int] = None) -> List[np.ndarray]:
        if self._targets is None:
            self._targets = oracle_targets(self.manifest, threads, cfg.oracle())
        return self._targets

    def oracle_depths(self, cfg: RunConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(depth map, opacity map) of every test view, in evaluation order."""
        if self._depths is None:
            m = self.manifest
            self._depths = [
                render_oracle(m.scene, v.camera, m.near, m.far, cfg.oracle())[1:] for v in self.test_views
            ]
        return self._depths


def model_artifact(model_path: str | Path, kind: str) -> Path:
    """Sibling file of a model, e.g. ``kind="prune.json"`` → ``<stem>.prune.json``."""
    path = Path(model_path)
    return path.with_name(f"{path.stem}.{kind}")


def _as_field(source: ModelSource) -> RadianceField:
    return source if isinstance(source, RadianceField) else load_field(source)


def _save(model: RadianceField, path: str | Path) -> ByteReport:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {path.parent}: {exc}", path=str(path.parent)) from exc
    return save(model, path)


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {path}: {exc}", path=str(path)) from exc
    return path


# ── Stages ────────────────────────────────────────────────────────

def gen_scene(cfg: RunConfig, out_dir: str | Path, threads: Optional[int] = None) -> DatasetManifest:
    """Render the benchmark scene's train/test views into ``out_dir``."""
    manifest = generate_dataset(
        benchmark_scene(), cfg.n_train_views, cfg.n_test_views, cfg.resolution, cfg.seed, out_dir,
        oracle=cfg.oracle(), threads=threads,
    )
    log_stage_metrics("gen_scene")
    return manifest


def _evaluator(cfg: RunConfig, data: DatasetHandle, threads: Optional[int]):
    if cfg.eval_every == 0:
        return None
    sampling = cfg.evaluation_sampling()

    def run(model: RadianceField) -> float:
        return evaluate_model(model, data.manifest, sampling, data.targets(cfg, threads), threads).psnr_mean

    return run


def train_stage(
    cfg: RunConfig,
    data: DatasetHandle,
    model_out: str | Path,
    threads: Optional[int] = None,
) -> Tuple[RadianceField, TrainLog, ByteReport]:
    """Train a fresh field on the dataset's train views and save it."""
    rays = TrainingRays.from_dataset(data.manifest, data.root)
    model = cfg.new_field()
    log = train(model, rays, cfg.train_config(), evaluator=_evaluator(cfg, data, threads))
    size = _save(model, model_out)
    log.write_csv(model_artifact(model_out, "train.csv"))
    log_stage_metrics("train")
    return model, log, size


def prune_stage(
    cfg: RunConfig,
    model: ModelSource,
    ratio: float,
    model_out: str | Path,
) -> Tuple[RadianceField, PruneReport, ByteReport]:
    """Global (or layerwise) magnitude pruning of a saved model."""
    pruned = _as_field(model).copy()
    with timed_stage("prune"):
        report = apply_prune(pruned, cfg.prune_config(ratio))
    size = _save(pruned, model_out)
    report.write_json(model_artifact(model_out, "prune.json"))
    return pruned, report, size


def retrain_stage(
    cfg: RunConfig,
    data: DatasetHandle,
    model: ModelSource,
    model_out: str | Path,
    threads: Optional[int] = None,
) -> Tuple[RadianceField, TrainLog, ByteReport]:
    """Fine-tune a pruned model's surviving weights and save the result."""
    tuned = _as_field(model).copy()
    rays = TrainingRays.from_dataset(data.manifest, data.root)
    log = retrain(tuned, rays, cfg.train_config(), evaluator=_evaluator(cfg, data, threads))
    size = _save(tuned, model_out)
    log.write_csv(model_artifact(model_out, "train.csv"))
    log_stage_metrics("retrain")
    return tuned, log, size


def eval_stage(
    cfg: RunConfig,
    data: DatasetHandle,
    model: ModelSource,
    threads: Optional[int] = None,
) -> EvaluationResult:
    with timed_stage("eval"):
        return evaluate_model(_as_field(model), data.manifest, cfg.evaluation_sampling(),
                              data.targets(cfg, threads), threads)


def render_stage(
    cfg: RunConfig,
    data: DatasetHandle,
    model: ModelSource,
    out_dir: str | Path,
    views: Optional[Sequence[ViewRecord]] = None,
    threads: Optional[int] = None,
) -> List[Path]:
    """Render test views (all by default) to ``out_dir/<view>.ppm``."""
    field_ = _as_field(model)
    out = _mkdir(Path(out_dir))
    m = data.manifest
    paths = []
    with timed_stage("render"):
        for view in views if views is not None else data.test_views:
            image, _, _ = render_image(field_, view.camera, cfg.evaluation_sampling(), m.near, m.far,
                                       threads=threads)
            paths.append(write_image(out / Path(view.image).name, image))
    return paths


@dataclass
class DepthExport:
    paths: List[Path]
    mae: float          # mean over views of the opaque-pixel depth error


def depth_stage(
    cfg: RunConfig,
    data: DatasetHandle,
    model: ModelSource,
    out_dir: str | Path,
    threads: Optional[int] = None,
) -> DepthExport:
    """Depth maps of every test view, plus their error against the analytic depth."""
    field_ = _as_field(model)
    out = _mkdir(Path(out_dir))
    m = data.manifest
    paths, errors = [], []
    with timed_stage("depth"):
        for view, (true_depth, true_opacity) in zip(data.test_views, data.oracle_depths(cfg)):
            _, depth, _ = render_image(field_, view.camera, cfg.evaluation_sampling(), m.near, m.far,
                                       threads=threads, purpose="depth")
            raw, _ = export_depth(depth, out / f"{Path(view.image).stem}.depth", m.near, m.far)
            paths.append(raw)
            errors.append(depth_mae(depth, true_depth, true_opacity))
    finite = [e for e in errors if np.isfinite(e)]
    mae = float(np.mean(finite)) if finite else float("nan")
    logger.info("Depth maps written to %s, MAE %.4f", out, mae, extra={"stage": "depth"})
    return DepthExport(paths=paths, mae=mae)


def mesh_stage(
    cfg: RunConfig,
    model: ModelSource,
    out_path: str | Path,
    bounds_radius: Optional[float] = None,
    threads: Optional[int] = None,
) -> TriangleMesh:
    """Marching-cubes mesh of the σ = ``cfg.iso_level`` surface."""
    radius = bounds_radius or settings.scene_bounds_radius
    if radius <= 0:
        raise ContractError(f"bounds radius must be > 0, got {radius}")
    with timed_stage("mesh"):
        grid = sample_density_grid(_as_field(model), cube_bounds(radius), cfg.grid_resolution, threads=threads)
        mesh = extract_mesh(grid, cfg.iso_level)
        export_mesh(mesh, out_path)
    logger.info(
        "Mesh %s: %d vertices, %d faces (iso %.2f, %d³)", out_path, mesh.n_vertices, mesh.n_faces,
        cfg.iso_level, cfg.grid_resolution, extra={"stage": "mesh"},
    )
    return mesh
