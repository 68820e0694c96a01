"""
Prometheus instrumentation for the compression pipeline.

Exposes:
  - Work counters (rays rendered, optimizer steps)
  - Stage latencies
  - Model state gauges (sparsity, last PSNR)

Nothing here is served over HTTP; experiments dump the registry to a
``metrics.prom`` text file next to their outputs.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from typing import Iterator

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Info,
    write_to_textfile,
)

from app.core.config import TOOL_VERSION

logger = logging.getLogger(__name__)

# ── Custom registry to avoid conflicts ───────────────────────────
registry = CollectorRegistry()

app_info = Info(
    "scenecompress_app",
    "Scene compression pipeline information",
    registry=registry,
)
app_info.info({"version": TOOL_VERSION, "name": "scenecompress"})

# ── Work counters ─────────────────────────────────────────────────
rays_rendered_total = Counter(
    "rays_rendered_total",
    "Camera rays pushed through the renderer",
    ["purpose"],
    registry=registry,
)

optimizer_steps_total = Counter(
    "optimizer_steps_total",
    "Adaptive optimizer updates applied",
    registry=registry,
)

# ── Stage latencies ───────────────────────────────────────────────
stage_duration_seconds = Histogram(
    "stage_duration_seconds",
    "Wall time of pipeline stages",
    ["stage"],
    buckets=(0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 900.0, 1800.0),
    registry=registry,
)

# ── Model state ───────────────────────────────────────────────────
model_sparsity = Gauge(
    "model_sparsity_ratio",
    "Fraction of weights masked in the most recently pruned model",
    registry=registry,
)

last_psnr_db = Gauge(
    "last_psnr_db",
    "Mean test PSNR of the most recent evaluation",
    ["phase"],
    registry=registry,
)

memory_rss_bytes = Gauge(
    "process_memory_rss_bytes",
    "Resident set size sampled at stage boundaries",
    registry=registry,
)


@contextmanager
def timed_stage(stage: str) -> Iterator[None]:
    """Record the wall time of a block under ``stage``."""
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        stage_duration_seconds.labels(stage=stage).observe(elapsed)
        logger.info(
            "Stage %s finished in %.2fs", stage, elapsed,
            extra={"stage": stage, "latency_ms": round(elapsed * 1000, 1)},
        )


def write_textfile(path: str) -> None:
    """Dump the registry in Prometheus text exposition format."""
    write_to_textfile(path, registry)
