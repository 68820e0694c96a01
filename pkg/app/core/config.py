"""
Centralized configuration: every default of the pipeline lives here.
All settings are validated at construction via pydantic-settings.

The CLI accepts explicit flags only, so environment variables and .env
files are deliberately not consulted: override by passing keyword
arguments to ``Settings`` (the CLI does this from its flags).
"""

from __future__ import annotations

from typing import List, Tuple, Type

from pydantic import Field
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource

TOOL_VERSION = "1.0.0"


class Settings(BaseSettings):
    # ── Field architecture ───────────────────────────────────────
    hidden_width: int = 64
    hidden_layers: int = 4
    skip_input_at: int = 3          # trunk layer that re-reads the encoded position
    head_width: int = 32
    l_pos: int = 6
    l_dir: int = 4
    include_identity: bool = True

    # ── Optimizer (shared by train and retrain) ──────────────────
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    # ── Sampling / rendering ─────────────────────────────────────
    n_samples: int = 64
    white_background: bool = True
    oracle_supersample: int = 8     # analytic ground truth uses 8x samples
    render_chunk_rays: int = 1024   # fixed chunking keeps output thread-count independent
    threads: int = 0                # 0 → machine parallelism

    # ── Synthetic scene / dataset ────────────────────────────────
    resolution: int = 96
    n_train_views: int = 20
    n_test_views: int = 5
    camera_radius: float = 4.0
    scene_bounds_radius: float = 1.5
    bounds_padding: float = 0.10    # near/far from the bounding sphere padded 10 %
    field_of_view_deg: float = 50.0

    # ── Training ─────────────────────────────────────────────────
    iterations: int = 3000
    rays_per_batch: int = 1024
    retrain_iterations: int = 500
    eval_every: int = 500

    # ── Pruning ──────────────────────────────────────────────────
    prune_ratios: List[float] = Field(default_factory=lambda: [0.30, 0.50, 0.70, 0.90])
    prune_scope: str = "global"

    # ── Geometry ─────────────────────────────────────────────────
    iso_level: float = 25.0
    mesh_grid_resolution: int = 128
    test_grid_resolution: int = 64

    # ── Run ──────────────────────────────────────────────────────
    seed: int = 1

    # ── Logging ──────────────────────────────────────────────────
    log_level: str = "INFO"
    log_json: bool = False

    model_config = {
        "case_sensitive": False,
        "extra": "ignore",
    }

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # explicit arguments only
        return (init_settings,)


# Singleton, import this everywhere
settings = Settings()
