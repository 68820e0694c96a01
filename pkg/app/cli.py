"""
scenecompress CLI - radiance-field scene compression by magnitude pruning
Usage: python cli.py <command> [options]   (or: python -m app <command>)

Exit codes: 0 ok, 1 unexpected, 2 usage, 3 configuration, 4 I/O,
5 model file, 6 numeric, 7 contract.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError

from app.core.config import TOOL_VERSION, settings
from app.core.errors import EXIT_OK, EXIT_USAGE, ConfigurationError, DatasetIOError, SceneCompressionError, exit_code_for
from app.core.logger import setup_logging
from app.pipeline.experiment import finish_run, replay_experiment, run_experiment, start_run
from app.pipeline.stages import (
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

logger = logging.getLogger("scenecompress")

EPILOG = """
Examples:
  python cli.py experiment --seed 1 --out runs/seed1      # full pruning study
  python cli.py experiment --replay runs/seed1/run_manifest.json --out runs/again
  python cli.py gen-scene --out data/bench                # synthetic dataset
  python cli.py train --data data/bench --out models/original.nrfp
  python cli.py prune --model models/original.nrfp --ratio 0.7 --out models/p70.nrfp
  python cli.py retrain --model models/p70.nrfp --data data/bench --out models/p70r.nrfp
  python cli.py eval --model models/p70r.nrfp --data data/bench
  python cli.py mesh --model models/p70r.nrfp --out meshes/p70r.obj --iso 25
"""


class HelpFormatter(argparse.RawDescriptionHelpFormatter, argparse.ArgumentDefaultsHelpFormatter):
    pass


def print_header(title: str) -> None:
    print(f"\n{'=' * 50}")
    print(f"🚀 {title}")
    print(f"{'=' * 50}")


def print_success(message: str) -> None:
    print(f"✅ {message}")


def print_error(message: str) -> None:
    print(f"❌ Error: {message}", file=sys.stderr)


# ── Argument types ────────────────────────────────────────────────

def ratio_arg(text: str) -> float:
    try:
        p = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if math.isnan(p) or not 0.0 <= p < 1.0:
        raise argparse.ArgumentTypeError(f"pruning ratio must lie in [0, 1), got {text}")
    return p


def _bounded_int(minimum: int) -> Callable[[str], int]:
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value
    return parse


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not value > 0 or math.isinf(value):
        raise argparse.ArgumentTypeError(f"must be a finite number > 0, got {text}")
    return value


positive_int = _bounded_int(1)
nonnegative_int = _bounded_int(0)


# ── Parser ────────────────────────────────────────────────────────

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=settings.seed, help="single source of all randomness")
    p.add_argument("--threads", type=nonnegative_int, default=settings.threads,
                   help="worker cap, 0 = machine parallelism (results do not depend on it)")
    p.add_argument("--samples", type=_bounded_int(2), default=settings.n_samples, help="samples per ray")
    p.add_argument("--log-level", default=settings.log_level, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--json-logs", action="store_true", default=settings.log_json, help="JSON lines on stderr")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=positive_int, default=settings.iterations, help="training iterations")
    p.add_argument("--rays-per-batch", type=positive_int, default=settings.rays_per_batch)
    p.add_argument("--eval-every", type=nonnegative_int, default=settings.eval_every,
                   help="test-PSNR checkpoint period, 0 = final only")


def _retraining(p: argparse.ArgumentParser) -> None:
    p.add_argument("--retrain-iterations", type=nonnegative_int, default=settings.retrain_iterations,
                   help="fine-tuning iterations after pruning")


def _geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iso", type=positive_float, default=settings.iso_level, help="density level of the mesh")
    p.add_argument("--grid-resolution", type=_bounded_int(2), default=settings.mesh_grid_resolution,
                   help="density grid samples per axis")


def _scene(p: argparse.ArgumentParser) -> None:
    p.add_argument("--resolution", type=positive_int, default=settings.resolution, help="image width = height")
    p.add_argument("--train-views", type=positive_int, default=settings.n_train_views)
    p.add_argument("--test-views", type=positive_int, default=settings.n_test_views)


def _scope(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scope", choices=["global", "layerwise"], default=settings.prune_scope,
                   help="one threshold for all layers, or floor(p·N) per layer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenecompress",
        description="scenecompress - radiance-field scene compression by magnitude pruning",
        formatter_class=HelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=HelpFormatter)
        _common(p)
        return p

    p = command("gen-scene", "Render the synthetic benchmark dataset")
    p.add_argument("--out", required=True, type=Path, help="dataset directory")
    _scene(p)

    p = command("train", "Train a radiance field on a dataset")
    p.add_argument("--data", required=True, type=Path, help="dataset directory or manifest.txt")
    p.add_argument("--out", required=True, type=Path, help="model file to write")
    _training(p)

    p = command("prune", "Magnitude-prune a saved model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--ratio", required=True, type=ratio_arg, help="fraction of weights to remove, in [0, 1)")
    p.add_argument("--out", required=True, type=Path, help="pruned model file")
    _scope(p)

    p = command("retrain", "Fine-tune a pruned model under its fixed mask")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--rays-per-batch", type=positive_int, default=settings.rays_per_batch)
    p.add_argument("--eval-every", type=nonnegative_int, default=settings.eval_every)
    _retraining(p)

    p = command("render", "Render a model's test views to PPM")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = command("depth", "Export depth maps of a model's test views")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = command("mesh", "Extract a marching-cubes mesh from a model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help=".obj file to write")
    p.add_argument("--data", type=Path, help="dataset whose scene bounds the grid (default: settings radius)")
    _geometry(p)

    p = command("eval", "Score a model on a dataset's test views")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", type=Path, help="optional JSON file for the per-view scores")

    p = command("experiment", "Full study: train, prune at every ratio, retrain, evaluate, report")
    p.add_argument("--out", type=Path, help="run directory (required unless the replayed manifest names one)")
    p.add_argument("--ratio", type=ratio_arg, nargs="+", default=list(settings.prune_ratios),
                   help="pruning ratios to study")
    p.add_argument("--replay", type=Path, help="re-run from a stored run_manifest.json")
    _scene(p)
    _training(p)
    _retraining(p)
    _scope(p)
    _geometry(p)
    return parser


# ── Commands ──────────────────────────────────────────────────────

_CONFIG_FLAGS = {
    "seed": "seed",
    "samples": "n_samples",
    "resolution": "resolution",
    "train_views": "n_train_views",
    "test_views": "n_test_views",
    "iterations": "iterations",
    "retrain_iterations": "retrain_iterations",
    "rays_per_batch": "rays_per_batch",
    "eval_every": "eval_every",
    "scope": "scope",
    "iso": "iso_level",
    "grid_resolution": "grid_resolution",
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {field: getattr(args, flag) for flag, field in _CONFIG_FLAGS.items() if hasattr(args, flag)}
    if args.command == "experiment":
        overrides["ratios"] = args.ratio
    return RunConfig(**overrides)


def _require(parser: argparse.ArgumentParser, args: argparse.Namespace, *names: str) -> None:
    for name in names:
        path: Optional[Path] = getattr(args, name, None)
        if path is not None and not path.exists():
            parser.error(f"--{name} {path} does not exist; run the stage that produces it first")


def cmd_gen_scene(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    m = gen_scene(cfg, args.out, args.threads)
    print_success(f"{len(m.train_views)} train / {len(m.test_views)} test views written to {args.out}")
    return {"dataset": args.out}


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    _, log, size = train_stage(cfg, DatasetHandle.open(args.data), args.out, args.threads)
    print_success(f"trained {cfg.iterations} iterations, final loss {log.final_loss:.6f}, "
                  f"{size.encoded_bytes} bytes → {args.out}")
    return {"model": args.out}


def cmd_prune(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    _, report, size = prune_stage(cfg, args.model, args.ratio, args.out)
    print_success(f"pruned {report.pruned_count}/{report.total_weights} weights "
                  f"(nominal x{report.nominal_compression:.2f}, measured x{size.measured_ratio:.2f}) → {args.out}")
    return {"model": args.out}


def cmd_retrain(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    _, log, _ = retrain_stage(cfg, DatasetHandle.open(args.data), args.model, args.out, args.threads)
    print_success(f"retrained {cfg.retrain_iterations} iterations, final loss {log.final_loss:.6f} → {args.out}")
    return {"model": args.out}


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    paths = render_stage(cfg, DatasetHandle.open(args.data), args.model, args.out, threads=args.threads)
    print_success(f"{len(paths)} views rendered to {args.out}")
    return {"renders": args.out}


def cmd_depth(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    export = depth_stage(cfg, DatasetHandle.open(args.data), args.model, args.out, args.threads)
    print_success(f"{len(export.paths)} depth maps written to {args.out} (MAE {export.mae:.4f})")
    return {"depth": args.out}


def cmd_mesh(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    radius = DatasetHandle.open(args.data).manifest.scene.bounds_radius if args.data else None
    mesh = mesh_stage(cfg, args.model, args.out, radius, args.threads)
    print_success(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces → {args.out}")
    return {"mesh": args.out}


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    result = eval_stage(cfg, DatasetHandle.open(args.data), args.model, args.threads)
    print_header(f"Evaluation of {args.model}")
    for name, err, db in zip(result.view_names, result.view_mse, result.view_psnr):
        print(f"   {name:<28} MSE {err:.6f}  PSNR {db:.3f} dB")
    print(f"   mean PSNR {result.psnr_mean:.3f} dB | PSNR of mean MSE {result.psnr_of_mean_mse:.3f} dB")
    if args.out is None:
        return {}
    payload = {
        "views": [{"image": n, "mse": e, "psnr_db": d}
                  for n, e, d in zip(result.view_names, result.view_mse, result.view_psnr)],
        "psnr_mean_db": result.psnr_mean,
        "psnr_of_mean_mse_db": result.psnr_of_mean_mse,
        "mse_mean": result.mse_mean,
    }
    try:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {args.out}: {exc}", path=str(args.out)) from exc
    return {"scores": args.out}


def cmd_experiment(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Path]:
    if args.replay is not None:
        result = replay_experiment(args.replay, args.out, args.threads)
    else:
        result = run_experiment(cfg, args.out, args.threads)
    print_header("Pruning study")
    for r in result.records:
        print(f"   {r.phase.value:<10} p={r.ratio:.2f}  PSNR {r.psnr_mean_db:7.3f} dB  MSE {r.mse_mean:.6f}  "
              f"x{r.nominal_ratio:.2f} nominal / x{r.measured_ratio:.2f} measured")
    for msg in result.trend.warnings + result.trend.failures:
        print(f"   ⚠️  {msg}")
    print_success(f"report: {result.report.results_csv}")
    return {}


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], Dict[str, Path]]] = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "prune": cmd_prune,
    "retrain": cmd_retrain,
    "render": cmd_render,
    "depth": cmd_depth,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "experiment" and args.out is None and args.replay is None:
            parser.error("experiment needs --out (or --replay with a manifest that names one)")
        _require(parser, args, "data", "model", "replay")
    except SystemExit as exc:
        # --help exits cleanly; argparse reports every other problem on stderr first
        if exc.code in (0, None):
            raise
        return EXIT_USAGE

    setup_logging(args.log_level, args.json_logs)
    try:
        cfg = config_from_args(args)
        # experiments manage their own run manifest
        track = args.command != "experiment" and args.out is not None
        inputs = {k: getattr(args, k) for k in ("data", "model") if getattr(args, k, None) is not None}
        run = start_run(args.command, cfg, args.out, args.threads, inputs) if track else None
        outputs = COMMANDS[args.command](args, cfg)
        if run is not None:
            finish_run(run, args.out, outputs)
    except ValidationError as exc:
        print_error(f"invalid configuration\n{exc}")
        return exit_code_for(ConfigurationError(str(exc)))
    except SceneCompressionError as exc:
        print_error(str(exc))
        logger.debug("Failure detail", exc_info=True)
        return exit_code_for(exc)
    except KeyboardInterrupt:
        print_error("interrupted")
        return 130
    except Exception as exc:  # noqa: BLE001
        logger.exception("Unexpected failure: %s", exc)
        print_error(f"unexpected failure: {exc}")
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
