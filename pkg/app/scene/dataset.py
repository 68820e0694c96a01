"""
Synthetic multi-view datasets of an analytic scene.

Directory layout:
    <root>/manifest.txt            JSON, keys sorted, format_version 1
    <root>/images/view_0000.ppm    one 8-bit PPM per view

Ground truth is the analytic scene rendered with the same quadrature as the
learned field, at ``oracle_supersample`` times the sample count and bin
midpoints.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.config import settings
from app.core.errors import ConfigurationError, DatasetIOError, ManifestError
from app.core.prometheus_metrics import timed_stage
from app.render.camera import Camera, look_at, near_far
from app.render.renderer import render_image, resolve_threads
from app.render.volume import SamplingConfig
from app.scene.analytic import AnalyticScene
from app.scene.images import read_image, write_image

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
IMAGE_DIR = "images"
CAMERA_STREAM = 7
ELEVATION_RANGE_DEG = (-20.0, 60.0)


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class ViewRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    image: str
    split: Split
    camera: Camera


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: Literal[1] = FORMAT_VERSION
    seed: int
    resolution: int = Field(ge=1)
    focal: float = Field(gt=0.0)
    scene: AnalyticScene
    near: float = Field(gt=0.0)
    far: float
    views: List[ViewRecord]

    @model_validator(mode="after")
    def _consistent(self) -> "DatasetManifest":
        if self.far <= self.near:
            raise ValueError(f"far ({self.far}) must exceed near ({self.near})")
        names = [v.image for v in self.views]
        if len(set(names)) != len(names):
            raise ValueError("view image names must be unique (train and test are disjoint)")
        return self

    def split(self, split: Split) -> List[ViewRecord]:
        return [v for v in self.views if v.split is split]

    @property
    def train_views(self) -> List[ViewRecord]:
        return self.split(Split.TRAIN)

    @property
    def test_views(self) -> List[ViewRecord]:
        return self.split(Split.TEST)

    def to_text(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


# ── Cameras ───────────────────────────────────────────────────────

def focal_for(resolution: int, fov_deg: float) -> float:
    return 0.5 * resolution / float(np.tan(np.radians(fov_deg) / 2.0))


def orbit_cameras(count: int, resolution: int, seed: int, radius: Optional[float] = None,
                  fov_deg: Optional[float] = None) -> List[Camera]:
    """Cameras on a sphere around the origin, looking at it, z up."""
    radius = radius or settings.camera_radius
    focal = focal_for(resolution, fov_deg or settings.field_of_view_deg)
    rng = np.random.default_rng([seed, CAMERA_STREAM])
    azimuth = rng.uniform(0.0, 2.0 * np.pi, size=count)
    elevation = np.radians(rng.uniform(*ELEVATION_RANGE_DEG, size=count))
    cams = []
    for az, el in zip(azimuth, elevation):
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.centred(focal, resolution, resolution, look_at(eye)))
    return cams


# ── Oracle ────────────────────────────────────────────────────────

def oracle_config(n_samples: Optional[int] = None, supersample: Optional[int] = None,
                  white_background: Optional[bool] = None) -> SamplingConfig:
    n = (n_samples or settings.n_samples) * (supersample or settings.oracle_supersample)
    bg = settings.white_background if white_background is None else white_background
    return SamplingConfig(n_samples=n, stratified=False, white_background=bg)


def render_oracle(scene: AnalyticScene, cam: Camera, near: float, far: float,
                  cfg: Optional[SamplingConfig] = None,
                  threads: Optional[int] = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Float ground truth: image, depth map and opacity map of one view."""
    return render_image(scene, cam, cfg or oracle_config(), near, far, threads=threads, purpose="oracle")


def render_oracle_views(manifest: DatasetManifest, views: List[ViewRecord],
                        cfg: Optional[SamplingConfig] = None,
                        threads: Optional[int] = None) -> List[np.ndarray]:
    """Float oracle images for ``views``, in order (parallel across views)."""
    cfg = cfg or oracle_config()
    workers = min(resolve_threads(threads), max(len(views), 1))

    def work(view: ViewRecord) -> np.ndarray:
        return render_oracle(manifest.scene, view.camera, manifest.near, manifest.far, cfg)[0]

    if workers <= 1:
        return [work(v) for v in views]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, views))


# ── Generation ────────────────────────────────────────────────────

def image_name(index: int) -> str:
    return f"{IMAGE_DIR}/view_{index:04d}.ppm"


def generate_dataset(
    scene: AnalyticScene,
    n_train: int,
    n_test: int,
    resolution: int,
    seed: int,
    out_dir: str | Path,
    oracle: Optional[SamplingConfig] = None,
    threads: Optional[int] = None,
) -> DatasetManifest:
    """Place cameras, render every view with the oracle and write the dataset."""
    if n_train < 1 or n_test < 1:
        raise ConfigurationError(f"need at least one train and one test view, got {n_train}/{n_test}")
    if resolution < 1:
        raise ConfigurationError(f"resolution must be >= 1, got {resolution}")
    root = Path(out_dir)
    try:
        (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create dataset directory {root}: {exc}", path=str(root)) from exc

    cams = orbit_cameras(n_train + n_test, resolution, seed)
    near, far = near_far(cams[0], scene.bounds_radius, settings.bounds_padding)
    views = [
        ViewRecord(image=image_name(i), split=Split.TRAIN if i < n_train else Split.TEST, camera=cam)
        for i, cam in enumerate(cams)
    ]
    manifest = DatasetManifest(
        seed=seed, resolution=resolution, focal=cams[0].focal, scene=scene, near=near, far=far, views=views,
    )

    with timed_stage("gen_scene"):
        images = render_oracle_views(manifest, views, oracle or oracle_config(), threads)
        for view, image in zip(views, images):
            write_image(root / view.image, image)
        write_manifest(manifest, root)

    logger.info(
        "Dataset written to %s: %d train / %d test views at %dpx (near %.3f, far %.3f)",
        root, n_train, n_test, resolution, near, far, extra={"stage": "gen_scene"},
    )
    return manifest


# ── Manifest I/O ──────────────────────────────────────────────────

def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def write_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    target = Path(root) / MANIFEST_NAME
    try:
        target.write_text(manifest.to_text(), encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot write manifest {target}: {exc}", path=str(target)) from exc
    return target


def parse_manifest(text: str, source: str = "<string>") -> DatasetManifest:
    try:
        return DatasetManifest.model_validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}: not valid JSON ({exc})", path=source) from exc
    except ValidationError as exc:
        raise ManifestError(f"{source}: schema violation\n{exc}", path=source) from exc


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Read ``manifest.txt`` (or the dataset directory holding it).

    With ``check_images`` every referenced image must exist with the declared size.
    """
    target = manifest_path(path)
    if not target.is_file():
        raise DatasetIOError(f"manifest not found: {target}", path=str(target))
    try:
        text = target.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {target}: {exc}", path=str(target)) from exc
    manifest = parse_manifest(text, str(target))
    if check_images:
        for view in manifest.views:
            _check_image(target.parent / view.image, view.camera)
    return manifest


def _check_image(path: Path, cam: Camera) -> None:
    if not path.is_file():
        raise ManifestError(f"manifest references missing image {path}", path=str(path))
    try:
        with Image.open(path) as img:
            size = img.size
    except OSError as exc:
        raise ManifestError(f"cannot open image {path}: {exc}", path=str(path)) from exc
    if size != (cam.width, cam.height):
        raise ManifestError(
            f"{path}: size {size[0]}×{size[1]} != declared {cam.width}×{cam.height}", path=str(path)
        )


def load_split_images(manifest: DatasetManifest, root: str | Path, split: Split) -> np.ndarray:
    """Decoded 8-bit images of one split as float (V, H, W, 3)."""
    root = Path(root)
    if root.is_file():
        root = root.parent
    views = manifest.split(split)
    return np.stack([read_image(root / v.image, (v.camera.width, v.camera.height)) for v in views])
