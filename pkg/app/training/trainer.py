"""
Photometric training loop for a radiance field.

Each iteration draws ``rays_per_batch`` rays uniformly over every train
pixel, renders them with stratified samples, and takes one optimizer step on
the mean squared colour error. Iteration ``i`` takes its pixels and sample
offsets from ``default_rng([seed, stream, i])``, so a run is reproducible
regardless of anything else running in the process.

The same loop serves the post-pruning retraining phase: a fresh optimizer,
``retrain_iterations`` steps, masks untouched.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.core import prometheus_metrics as prom
from app.core.config import settings
from app.core.errors import ContractError, DatasetIOError, NumericError
from app.core.monitoring import gauge, inc
from app.field.model import RadianceField, field_backward, field_forward
from app.mlp.optimizer import OptimizerConfig, OptimizerState, init_optimizer, optimizer_step
from app.render.camera import RayBatch, generate_rays
from app.render.renderer import sample_points
from app.render.volume import SamplingConfig, composite, composite_backward, sample_along
from app.scene.dataset import DatasetManifest, Split, load_split_images

logger = logging.getLogger(__name__)

TRAIN_STREAM = 2
RETRAIN_STREAM = 3

Evaluator = Callable[[RadianceField], float]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(default_factory=lambda: settings.iterations, ge=1)
    rays_per_batch: int = Field(default_factory=lambda: settings.rays_per_batch, ge=1)
    retrain_iterations: int = Field(default_factory=lambda: settings.retrain_iterations, ge=0)
    eval_every: int = Field(default_factory=lambda: settings.eval_every, ge=0)
    seed: int = Field(default_factory=lambda: settings.seed)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)


# ── Log ───────────────────────────────────────────────────────────

@dataclass
class TrainLogEntry:
    iteration: int
    loss: float
    test_psnr: float
    seconds: float


@dataclass
class TrainLog:
    phase: str
    entries: List[TrainLogEntry] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)     # every iteration

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.iteration, e.loss, e.test_psnr, e.seconds) for e in self.entries],
            columns=["iteration", "loss", "test_psnr", "seconds"],
        )

    def write_csv(self, path: str | Path) -> None:
        try:
            self.to_frame().to_csv(path, index=False, float_format="%.17g")
        except OSError as exc:
            raise DatasetIOError(f"cannot write train log {path}: {exc}", path=str(path)) from exc

    @classmethod
    def read_csv(cls, path: str | Path, phase: str = "train") -> "TrainLog":
        frame = pd.read_csv(path, float_precision="round_trip")
        entries = [
            TrainLogEntry(int(r.iteration), float(r.loss), float(r.test_psnr), float(r.seconds))
            for r in frame.itertuples(index=False)
        ]
        return cls(phase=phase, entries=entries)


# ── Data ──────────────────────────────────────────────────────────

@dataclass
class TrainingRays:
    """Every train pixel of every train view, flattened into one ray table."""

    rays: RayBatch
    targets: np.ndarray          # (N, 3)

    def __len__(self) -> int:
        return len(self.rays)

    @classmethod
    def from_images(cls, manifest: DatasetManifest, images: np.ndarray) -> "TrainingRays":
        views = manifest.train_views
        if not views:
            raise ContractError("dataset has no train views")
        if len(views) != len(images):
            raise ContractError(f"{len(images)} images for {len(views)} train views")
        batches = [generate_rays(v.camera, None, manifest.near, manifest.far) for v in views]
        rays = RayBatch(
            origins=np.concatenate([b.origins for b in batches]),
            directions=np.concatenate([b.directions for b in batches]),
            near=np.concatenate([b.near for b in batches]),
            far=np.concatenate([b.far for b in batches]),
            pixel_ids=np.concatenate([b.pixel_ids for b in batches]),
        )
        targets = np.concatenate([img.reshape(-1, 3) for img in images])
        return cls(rays=rays, targets=targets)

    @classmethod
    def from_dataset(cls, manifest: DatasetManifest, root: str | Path) -> "TrainingRays":
        return cls.from_images(manifest, load_split_images(manifest, root, Split.TRAIN))

    def draw(self, rng: np.random.Generator, count: int) -> Tuple[RayBatch, np.ndarray]:
        idx = rng.integers(0, len(self), size=count)
        return self.rays.subset(idx), self.targets[idx]


# ── Loss ──────────────────────────────────────────────────────────

def photometric_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all B×3 entries of the squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean(np.square(pred - target)))


def batch_loss(
    model: RadianceField,
    rays: RayBatch,
    targets: np.ndarray,
    sampling: SamplingConfig,
    rng: Optional[np.random.Generator],
    accumulate: bool = True,
) -> float:
    """Render a batch, return its loss and (optionally) accumulate gradients."""
    t, delta = sample_along(rays, sampling, rng)
    positions, directions = sample_points(rays, t)
    sigma, rgb, tape = field_forward(model, positions, directions)
    shape = t.shape
    sigma = sigma.reshape(shape)
    rgb = rgb.reshape(shape + (3,))
    result = composite(sigma, rgb, delta, t, sampling.white_background)
    loss = photometric_loss(result.rgb, targets)
    if accumulate and math.isfinite(loss):
        d_colour = 2.0 * (result.rgb - targets) / targets.size
        d_sigma, d_rgb = composite_backward(sigma, rgb, delta, result, d_colour, sampling.white_background)
        field_backward(model, tape, d_sigma.reshape(-1), d_rgb.reshape(-1, 3))
    return loss


def mask_digest(model: RadianceField) -> int:
    """CRC-32 over all packed masks; changes iff any mask bit changes."""
    crc = 0
    for w in model.weight_matrices():
        crc = zlib.crc32(np.packbits(w.mask, bitorder="little").tobytes(), crc)
    return crc


# ── Loops ─────────────────────────────────────────────────────────

def run_steps(
    model: RadianceField,
    data: TrainingRays,
    cfg: TrainConfig,
    iterations: int,
    stream: int,
    phase: str,
    opt: Optional[OptimizerState] = None,
    evaluator: Optional[Evaluator] = None,
) -> TrainLog:
    opt = opt or init_optimizer(model, cfg.optimizer)
    log = TrainLog(phase=phase)
    digest = mask_digest(model)
    start = time.perf_counter()

    for it in range(1, iterations + 1):
        rng = np.random.default_rng([cfg.seed, stream, it])
        rays, targets = data.draw(rng, cfg.rays_per_batch)
        model.zero_grad()
        loss = batch_loss(model, rays, targets, cfg.sampling, rng)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite {phase} loss {loss} at iteration {it}", iteration=it, loss=loss)
        optimizer_step(model, opt)
        log.losses.append(loss)

        if it == iterations or (cfg.eval_every and it % cfg.eval_every == 0):
            psnr = evaluator(model) if evaluator is not None else math.nan
            elapsed = time.perf_counter() - start
            log.entries.append(TrainLogEntry(it, loss, psnr, elapsed))
            logger.info(
                "%s iter %d/%d loss %.6f test PSNR %.2f dB",
                phase, it, iterations, loss, psnr,
                extra={"phase": phase, "iteration": it, "loss": loss, "psnr": psnr},
            )

    if mask_digest(model) != digest:
        raise ContractError(f"{phase} modified the pruning mask")
    inc(f"{phase}_iterations", iterations)
    prom.rays_rendered_total.labels(purpose=phase).inc(iterations * cfg.rays_per_batch)
    gauge(f"{phase}_final_loss", log.final_loss)
    return log


def train(
    model: RadianceField,
    data: TrainingRays,
    cfg: TrainConfig,
    evaluator: Optional[Evaluator] = None,
) -> TrainLog:
    """Initial training for ``cfg.iterations`` steps."""
    with prom.timed_stage("train"):
        return run_steps(model, data, cfg, cfg.iterations, TRAIN_STREAM, "train", evaluator=evaluator)


def retrain(
    model: RadianceField,
    data: TrainingRays,
    cfg: TrainConfig,
    evaluator: Optional[Evaluator] = None,
) -> TrainLog:
    """Fine-tune surviving weights of a pruned model under its frozen mask.

    Moments start from zero; 0 ``retrain_iterations`` leaves the model untouched.
    """
    if model.mask_popcount() == model.total_weights:
        raise ContractError("retrain expects a pruned model (mask is all ones)")
    if cfg.retrain_iterations == 0:
        return TrainLog(phase="retrain")
    with prom.timed_stage("retrain"):
        return run_steps(
            model, data, cfg, cfg.retrain_iterations, RETRAIN_STREAM, "retrain",
            opt=init_optimizer(model, cfg.optimizer), evaluator=evaluator,
        )
