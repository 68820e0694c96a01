"""
Process monitoring: pipeline counters plus psutil resource snapshots.

Counters are bumped from renderer worker threads, so every update goes
through one lock. Stage snapshots are mirrored into the Prometheus registry.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import Counter
from typing import Any, Dict

import psutil

from app.core import prometheus_metrics as prom

logger = logging.getLogger(__name__)

HIGH_RSS_MB = 4096.0

_lock = threading.Lock()
_counters: Counter[str] = Counter()
_gauges: Dict[str, float] = {}
_peak_rss_mb = 0.0
_process = psutil.Process(os.getpid())
_started = time.monotonic()


# ── Counters ──────────────────────────────────────────────────────

def inc(name: str, amount: int = 1) -> None:
    with _lock:
        _counters[name] += amount


def gauge(name: str, value: float) -> None:
    with _lock:
        _gauges[name] = float(value)


def get_counters() -> Dict[str, int]:
    with _lock:
        return dict(_counters)


def get_gauges() -> Dict[str, float]:
    with _lock:
        return dict(_gauges)


def reset() -> None:
    global _peak_rss_mb
    with _lock:
        _counters.clear()
        _gauges.clear()
        _peak_rss_mb = 0.0


# ── Resources ─────────────────────────────────────────────────────

def get_system_metrics() -> Dict[str, Any]:
    """RSS (current and peak), CPU time, threads and uptime of this process."""
    global _peak_rss_mb
    with _process.oneshot():
        rss_mb = _process.memory_info().rss / 2**20
        cpu = _process.cpu_times()
        threads = _process.num_threads()
    with _lock:
        _peak_rss_mb = max(_peak_rss_mb, rss_mb)
        peak = _peak_rss_mb
    return {
        "memory_rss_mb": round(rss_mb, 2),
        "memory_peak_rss_mb": round(peak, 2),
        "cpu_user_seconds": round(cpu.user, 2),
        "cpu_system_seconds": round(cpu.system, 2),
        "threads": threads,
        "system_cpu_count": psutil.cpu_count(logical=True) or 1,
        "uptime_seconds": round(time.monotonic() - _started, 1),
    }


def machine_parallelism() -> int:
    """Worker count used when ``--threads`` is left at 0."""
    return psutil.cpu_count(logical=True) or os.cpu_count() or 1


def log_stage_metrics(stage: str) -> Dict[str, Any]:
    """Record a resource snapshot at the end of a pipeline stage."""
    metrics = get_system_metrics()
    for key, value in metrics.items():
        gauge(f"system_{key}", value)
    prom.memory_rss_bytes.set(metrics["memory_rss_mb"] * 2**20)
    if metrics["memory_rss_mb"] > HIGH_RSS_MB:
        logger.warning("Stage %s ends at %.0f MB RSS", stage, metrics["memory_rss_mb"], extra={"stage": stage})
    logger.debug("Stage %s resources: %s", stage, metrics, extra={"stage": stage})
    return metrics
