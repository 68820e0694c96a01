"""Tests for app.pipeline (stages, experiment driver, run manifests) and the CLI."""

import json
import math

import pandas as pd
import pytest
from pydantic import ValidationError

from app.cli import build_parser, main
from app.compression.codec import load_field
from app.core.errors import EXIT_USAGE, ConfigurationError, DatasetIOError, ManifestError
from app.evaluation.metrics import Phase
from app.pipeline.experiment import (
    GEOMETRY_CSV,
    METRICS_FILE,
    RUN_MANIFEST,
    ExperimentLayout,
    RunManifest,
    label,
    replay_experiment,
    run_experiment,
    run_manifest_path,
)
from app.pipeline.stages import (
    DatasetHandle,
    RunConfig,
    depth_stage,
    eval_stage,
    gen_scene,
    mesh_stage,
    model_artifact,
    prune_stage,
    render_stage,
    retrain_stage,
    train_stage,
)
from app.scene.dataset import MANIFEST_NAME
from app.training.trainer import mask_digest

from tests.conftest import TINY_RUN

SUBCOMMANDS = ["gen-scene", "train", "prune", "retrain", "render", "depth", "mesh", "eval", "experiment"]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    return out, run_experiment(RunConfig(**TINY_RUN), out, threads=2)


@pytest.fixture
def data(tmp_path, tiny_run_config) -> DatasetHandle:
    gen_scene(tiny_run_config, tmp_path / "dataset", threads=1)
    return DatasetHandle.open(tmp_path / "dataset")


class TestRunConfig:
    def test_ratios_sorted_and_unique(self):
        assert RunConfig(ratios=[0.9, 0.3, 0.9, 0.5]).ratios == [0.3, 0.5, 0.9]

    @pytest.mark.parametrize("ratios", [[0.0], [1.0], [0.5, 1.2]])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ValidationError):
            RunConfig(ratios=ratios)

    def test_derived_configs(self, tiny_run_config):
        train_cfg = tiny_run_config.train_config()
        assert train_cfg.iterations == 4 and train_cfg.seed == 5
        assert train_cfg.sampling.stratified
        assert not tiny_run_config.evaluation_sampling().stratified
        assert tiny_run_config.oracle().n_samples == 16

    def test_frozen(self, tiny_run_config):
        with pytest.raises(ValidationError):
            tiny_run_config.seed = 2


class TestStages:
    def test_dataset_handle_accepts_manifest_file(self, tmp_path, data):
        other = DatasetHandle.open(tmp_path / "dataset" / MANIFEST_NAME)
        assert other.root == data.root
        assert other.manifest == data.manifest

    def test_train_prune_retrain_chain(self, tmp_path, tiny_run_config, data):
        original = tmp_path / "models" / "original.nrfp"
        model, log, size = train_stage(tiny_run_config, data, original)
        assert original.is_file() and model_artifact(original, "train.csv").is_file()
        assert [e.iteration for e in log.entries] == [2, 4]
        assert all(math.isfinite(e.test_psnr) for e in log.entries)
        assert size.encoded_bytes == original.stat().st_size

        pruned_path = tmp_path / "models" / "pruned.nrfp"
        pruned, report, _ = prune_stage(tiny_run_config, original, 0.5, pruned_path)
        assert report.pruned_count == math.floor(0.5 * model.total_weights)
        assert json.loads(model_artifact(pruned_path, "prune.json").read_text())["ratio"] == 0.5
        assert load_field(original).mask_popcount() == model.total_weights

        retrained_path = tmp_path / "models" / "retrained.nrfp"
        tuned, _, _ = retrain_stage(tiny_run_config, data, pruned_path, retrained_path)
        assert mask_digest(load_field(retrained_path)) == mask_digest(pruned)
        assert mask_digest(tuned) == mask_digest(pruned)

    def test_eval_stage_is_deterministic(self, tiny_run_config, data, tiny_field):
        a = eval_stage(tiny_run_config, data, tiny_field, threads=1)
        b = eval_stage(tiny_run_config, data, tiny_field, threads=3)
        assert a.view_mse == b.view_mse

    def test_render_stage(self, tmp_path, tiny_run_config, data, tiny_field):
        paths = render_stage(tiny_run_config, data, tiny_field, tmp_path / "renders")
        assert [p.name for p in paths] == [v.image.split("/")[-1] for v in data.test_views]
        assert all(p.suffix == ".ppm" and p.is_file() for p in paths)

    def test_depth_stage(self, tmp_path, tiny_run_config, data, tiny_field):
        export = depth_stage(tiny_run_config, data, tiny_field, tmp_path / "depth")
        assert len(export.paths) == 1
        assert export.paths[0].suffix == ".depth"
        assert export.paths[0].with_suffix(".pgm").is_file()
        assert math.isnan(export.mae) or export.mae >= 0

    def test_mesh_stage(self, tmp_path, tiny_run_config, tiny_field):
        mesh = mesh_stage(tiny_run_config, tiny_field, tmp_path / "m.obj", bounds_radius=1.5)
        assert (tmp_path / "m.obj").is_file()
        assert mesh.n_faces >= 0

    def test_missing_model_file(self, tmp_path, tiny_run_config, data):
        with pytest.raises(DatasetIOError):
            eval_stage(tiny_run_config, data, tmp_path / "absent.nrfp")


class TestExperiment:
    def test_ledger_rows(self, experiment):
        _, result = experiment
        phases = [(r.phase, r.ratio) for r in result.records]
        assert phases == [
            (Phase.ORIGINAL, 0.0),
            (Phase.PRUNED, 0.5), (Phase.RETRAINED, 0.5),
            (Phase.PRUNED, 0.9), (Phase.RETRAINED, 0.9),
        ]
        assert result.record(Phase.ORIGINAL).nominal_ratio == 1.0
        assert result.record(Phase.PRUNED, 0.9).nominal_ratio == pytest.approx(10.0)
        for r in result.records:
            assert r.measured_ratio <= r.nominal_ratio + 1e-12
            assert math.isfinite(r.psnr_mean_db)

    def test_layout_on_disk(self, experiment):
        out, result = experiment
        layout = ExperimentLayout(out)
        assert (layout.dataset / MANIFEST_NAME).is_file()
        for phase, ratio in [(Phase.ORIGINAL, 0.0), (Phase.PRUNED, 0.5), (Phase.RETRAINED, 0.9)]:
            name = label(phase, ratio)
            assert layout.model(name).is_file()
            assert len(list(layout.renders(name).glob("*.ppm"))) == 1
            assert len(list(layout.depth(name).glob("*.depth"))) == 1
            assert layout.mesh(name).is_file()
        assert model_artifact(layout.model("pruned_p0.50"), "prune.json").is_file()
        for name in ("results.csv", "psnr_vs_ratio.svg", "mse_vs_ratio.svg", GEOMETRY_CSV, METRICS_FILE):
            assert (out / name).is_file()

    def test_retraining_keeps_the_mask(self, experiment):
        out, _ = experiment
        layout = ExperimentLayout(out)
        for ratio in (0.5, 0.9):
            pruned = load_field(layout.model(label(Phase.PRUNED, ratio)))
            retrained = load_field(layout.model(label(Phase.RETRAINED, ratio)))
            assert mask_digest(pruned) == mask_digest(retrained)
            assert pruned.mask_popcount() == pruned.total_weights - math.floor(ratio * pruned.total_weights)

    def test_geometry_csv(self, experiment):
        out, result = experiment
        frame = pd.read_csv(out / GEOMETRY_CSV)
        assert list(frame.label) == ["original", "pruned_p0.50", "retrained_p0.50", "pruned_p0.90", "retrained_p0.90"]
        row = result.geometry_row(Phase.PRUNED, 0.5)
        assert row.mesh_faces == frame.mesh_faces[1]

    def test_run_manifest(self, experiment):
        out, result = experiment
        manifest = RunManifest.read(out)
        assert manifest.command == "experiment"
        assert manifest.config == RunConfig(**TINY_RUN)
        assert manifest.finished_at is not None
        assert manifest.streams["train"] != manifest.streams["retrain"]
        assert manifest.outputs["root"] == str(out)
        assert json.loads((out / RUN_MANIFEST).read_text())["config"]["ratios"] == [0.5, 0.9]

    def test_replay_reproduces_artifacts(self, experiment, tmp_path):
        out, result = experiment
        again = replay_experiment(out / RUN_MANIFEST, tmp_path / "again", threads=1)
        assert again.records == result.records
        for rel in ("results.csv", "psnr_vs_ratio.svg", "mse_vs_ratio.svg", GEOMETRY_CSV,
                    "models/retrained_p0.90.nrfp", "models/pruned_p0.50.prune.json",
                    "meshes/original.obj", "dataset/" + MANIFEST_NAME):
            assert (out / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel
        for img in (out / "renders").rglob("*.ppm"):
            assert img.read_bytes() == (tmp_path / "again" / img.relative_to(out)).read_bytes()

    def test_replay_rejects_other_commands(self, tmp_path, tiny_run_config):
        RunManifest(command="train", config=tiny_run_config).write(tmp_path / RUN_MANIFEST)
        with pytest.raises(ConfigurationError):
            replay_experiment(tmp_path / RUN_MANIFEST, tmp_path / "out")

    def test_unreadable_manifest(self, tmp_path):
        (tmp_path / RUN_MANIFEST).write_text('{"command": "experiment"}')
        with pytest.raises(ManifestError):
            RunManifest.read(tmp_path)
        with pytest.raises(DatasetIOError):
            RunManifest.read(tmp_path / "absent.json")

    def test_manifest_path_for_files(self, tmp_path):
        assert run_manifest_path(tmp_path / "m.nrfp") == tmp_path / "m.nrfp.run.json"
        assert run_manifest_path(tmp_path) == tmp_path / RUN_MANIFEST


# ── CLI ───────────────────────────────────────────────────────────

SMALL_SCENE = ["--resolution", "8", "--train-views", "2", "--test-views", "1", "--samples", "4", "--threads", "1"]


def exit_code(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


class TestCliParsing:
    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help(self, command, capsys):
        assert exit_code([command, "--help"]) == 0
        assert command in capsys.readouterr().out

    @pytest.mark.parametrize("ratio", ["1.0", "-0.1", "nan", "abc"])
    def test_bad_ratio_is_usage_error(self, tmp_path, ratio):
        (tmp_path / "m.nrfp").write_bytes(b"")
        argv = ["prune", "--model", str(tmp_path / "m.nrfp"), "--ratio", ratio, "--out", str(tmp_path / "o.nrfp")]
        assert main(argv) == EXIT_USAGE

    def test_missing_input_is_usage_error(self, tmp_path):
        argv = ["eval", "--model", str(tmp_path / "absent.nrfp"), "--data", str(tmp_path)]
        assert main(argv) == EXIT_USAGE

    def test_experiment_needs_out(self):
        assert main(["experiment"]) == EXIT_USAGE

    def test_unknown_option_is_usage_error(self, capsys):
        assert main(["prune", "--no-such-flag"]) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_zero_ratio_in_experiment_is_config_error(self, tmp_path):
        assert main(["experiment", "--out", str(tmp_path / "run"), "--ratio", "0.0"]) == 3

    def test_defaults_come_from_settings(self):
        args = build_parser().parse_args(["experiment", "--out", "x"])
        assert args.ratio == [0.3, 0.5, 0.7, 0.9]
        assert args.iso == 25.0


class TestCliStages:
    def test_stage_by_stage(self, tmp_path, capsys):
        data, model, pruned = tmp_path / "data", tmp_path / "m.nrfp", tmp_path / "p.nrfp"
        assert main(["gen-scene", "--out", str(data), *SMALL_SCENE]) == 0
        assert (data / MANIFEST_NAME).is_file()
        assert (data / RUN_MANIFEST).is_file()

        small = ["--samples", "4", "--threads", "1"]
        assert main(["train", "--data", str(data), "--out", str(model), "--iterations", "2",
                     "--rays-per-batch", "8", "--eval-every", "0", *small]) == 0
        assert run_manifest_path(model).is_file()

        assert main(["prune", "--model", str(model), "--ratio", "0.5", "--out", str(pruned), *small]) == 0
        assert main(["eval", "--model", str(pruned), "--data", str(data), "--out", str(tmp_path / "s.json"),
                     *small]) == 0
        scores = json.loads((tmp_path / "s.json").read_text())
        assert len(scores["views"]) == 1
        assert main(["mesh", "--model", str(pruned), "--data", str(data), "--out", str(tmp_path / "p.obj"),
                     "--grid-resolution", "4", *small]) == 0
        assert (tmp_path / "p.obj").is_file()
        assert "✅" in capsys.readouterr().out

    def test_retrain_of_unpruned_model_is_contract_error(self, tmp_path):
        data, model = tmp_path / "data", tmp_path / "m.nrfp"
        main(["gen-scene", "--out", str(data), *SMALL_SCENE])
        main(["train", "--data", str(data), "--out", str(model), "--iterations", "1", "--rays-per-batch", "4",
              "--eval-every", "0", "--samples", "4", "--threads", "1"])
        argv = ["retrain", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "r.nrfp"),
                "--samples", "4", "--threads", "1"]
        assert main(argv) == 7

    def test_corrupt_model_is_codec_error(self, tmp_path):
        data = tmp_path / "data"
        main(["gen-scene", "--out", str(data), *SMALL_SCENE])
        (tmp_path / "bad.nrfp").write_bytes(b"NRFP" + bytes(40))
        argv = ["eval", "--model", str(tmp_path / "bad.nrfp"), "--data", str(data), "--samples", "4"]
        assert main(argv) == 5

    def test_broken_dataset_is_io_error(self, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        (data / MANIFEST_NAME).write_text("{}")
        (tmp_path / "m.nrfp").write_bytes(b"")
        assert main(["eval", "--model", str(tmp_path / "m.nrfp"), "--data", str(data)]) == 4

    def test_replay_from_cli(self, experiment, tmp_path):
        out, result = experiment
        assert main(["experiment", "--replay", str(out / RUN_MANIFEST), "--out", str(tmp_path / "r"),
                     "--threads", "1"]) == 0
        assert (tmp_path / "r" / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
