"""
Shared fixtures for the scenecompress test suite.
"""

from __future__ import annotations

import os
import sys

import numpy as np
import pytest

# Ensure project root is on sys.path
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from app.field.encoding import EncodingConfig  # noqa: E402
from app.field.model import RadianceField, build_field  # noqa: E402
from app.mlp.network import Network, NetworkSpec, init_network  # noqa: E402
from app.pipeline.stages import RunConfig  # noqa: E402
from app.scene.analytic import AnalyticScene, benchmark_scene, sphere_scene  # noqa: E402
from app.scene.dataset import DatasetManifest, generate_dataset, oracle_config  # noqa: E402

TINY_WIDTHS = dict(hidden_width=8, hidden_layers=3, skip_input_at=2, head_width=6)
TINY_ENCODING = EncodingConfig(l_pos=2, l_dir=1, include_identity=True)


# ── Networks ──────────────────────────────────────────────────────

@pytest.fixture
def tiny_spec() -> NetworkSpec:
    """5 → 8 → 8 → 3 with the input re-read at layer 2."""
    return NetworkSpec(layer_widths=(5, 8, 8, 3), skip_input_at=2, seed=3)


@pytest.fixture
def tiny_network(tiny_spec) -> Network:
    return init_network(tiny_spec)


def make_field(seed: int = 0) -> RadianceField:
    return build_field(seed, TINY_ENCODING, **TINY_WIDTHS)


@pytest.fixture
def tiny_field() -> RadianceField:
    return make_field(0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ── Scenes ────────────────────────────────────────────────────────

@pytest.fixture
def unit_sphere() -> AnalyticScene:
    return sphere_scene(radius=1.0, density=50.0)


@pytest.fixture
def bench_scene() -> AnalyticScene:
    return benchmark_scene()


@pytest.fixture
def tiny_dataset(tmp_path) -> tuple:
    """(root, manifest): 2 train + 1 test views of the benchmark scene at 8×8."""
    root = tmp_path / "dataset"
    manifest: DatasetManifest = generate_dataset(
        benchmark_scene(), n_train=2, n_test=1, resolution=8, seed=3, out_dir=root,
        oracle=oracle_config(8, 2), threads=1,
    )
    return root, manifest


TINY_RUN = dict(
    seed=5,
    resolution=8,
    n_train_views=2,
    n_test_views=1,
    l_pos=2,
    l_dir=1,
    n_samples=8,
    oracle_supersample=2,
    iterations=4,
    retrain_iterations=2,
    rays_per_batch=16,
    eval_every=2,
    ratios=[0.5, 0.9],
    iso_level=1.0,
    grid_resolution=8,
    **TINY_WIDTHS,
)


@pytest.fixture
def tiny_run_config() -> RunConfig:
    """A run small enough for a full experiment in a few seconds."""
    return RunConfig(**TINY_RUN)
