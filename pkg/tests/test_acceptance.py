"""Tests for research.benchmarks.trend, plus the full-scale benchmark runs (marked slow)."""

import math

import pytest

from app.evaluation.metrics import MetricsRecord, Phase, check_trend
from app.pipeline.experiment import RUN_MANIFEST, GeometryRow, replay_experiment, run_experiment
from app.pipeline.stages import RunConfig
from app.scene.analytic import benchmark_scene
from app.scene.dataset import generate_dataset
from research.benchmarks.trend import MAX_ORACLE_GAP_DB, assess_records, assess_trend, oracle_gap_db


def row(phase, ratio, db):
    return MetricsRecord(dataset="benchmark", seed=1, ratio=ratio, phase=phase, psnr_mean_db=db,
                         psnr_of_mean_mse_db=db, mse_mean=10 ** (-db / 10), nominal_ratio=1.0, measured_ratio=1.0)


def study(pruned, retrained, original=27.0):
    rows = [row(Phase.ORIGINAL, 0.0, original)]
    for p, a, b in zip((0.3, 0.5, 0.7, 0.9), pruned, retrained):
        rows += [row(Phase.PRUNED, p, a), row(Phase.RETRAINED, p, b)]
    return rows


def geometry(original_mae, retrained_mae):
    return [GeometryRow("original", "original", 0.0, original_mae, 10, 16),
            GeometryRow("retrained_p0.30", "retrained", 0.3, retrained_mae, 10, 16)]


class TestAssessment:
    def test_expected_curve_passes(self):
        out = assess_records(study([26.5, 25, 22, 16], [26.9, 26.2, 25, 22]), geometry(0.1, 0.12))
        assert out.ok, out.failures
        assert out.drop_at_highest == pytest.approx(11.0)
        assert out.recovery_at_highest == pytest.approx(6 / 11)
        assert out.depth_error_growth == pytest.approx(1.2)

    def test_weak_original(self):
        out = assess_records(study([20, 19, 18, 15], [21, 20, 19, 18], original=22.0))
        assert any("original PSNR" in f for f in out.failures)

    def test_inversion_allowed_only_at_lowest_ratio(self):
        assert assess_records(study([27.2, 25, 22, 16], [27.3, 26, 25, 22])).ok
        out = assess_records(study([26, 25, 25.5, 16], [26.5, 26, 25.8, 22]))
        assert any("p=0.70" in f for f in out.failures)

    def test_small_drop(self):
        out = assess_records(study([26.9, 26.5, 25.5, 25], [27, 26.8, 26, 26]))
        assert any("costs only" in f for f in out.failures)

    def test_retraining_must_not_hurt(self):
        out = assess_records(study([26.5, 25, 22, 16], [26.0, 26.2, 25, 22]))
        assert any("lowers PSNR at p=0.30" in f for f in out.failures)

    def test_weak_recovery(self):
        out = assess_records(study([26.5, 25, 22, 16], [26.9, 26.2, 25, 17]))
        assert any("recovers" in f for f in out.failures)
        assert out.recovery_at_highest == pytest.approx(1 / 11)

    def test_depth_error_growth(self):
        out = assess_records(study([26.5, 25, 22, 16], [26.9, 26.2, 25, 22]), geometry(0.1, 0.2))
        assert not out.ok
        assert out.summary()["depth_error_growth"] == 2.0

    def test_incomplete_ledger(self):
        assert not assess_records([row(Phase.ORIGINAL, 0.0, 30.0)]).ok

    def test_summary_of_empty_assessment(self):
        summary = assess_records([]).summary()
        assert summary["ok"] is False
        assert math.isnan(summary["original_psnr_db"])


@pytest.mark.slow
class TestBenchmark:
    @pytest.fixture(scope="class")
    def study_run(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("benchmark")
        return out, run_experiment(RunConfig(seed=1), out)

    def test_trend_reproduction(self, study_run):
        _, result = study_run
        assessment = assess_trend(result)
        assert assessment.ok, assessment.failures
        assert check_trend(result.records).ok

    def test_replay_is_byte_identical_for_other_thread_counts(self, study_run, tmp_path):
        out, result = study_run
        again = replay_experiment(out / RUN_MANIFEST, tmp_path / "replay", threads=1)
        assert again.records == result.records
        for pattern in ("results.csv", "models/*.nrfp", "meshes/*.obj"):
            files = sorted(out.glob(pattern))
            assert files
            for path in files:
                assert path.read_bytes() == (tmp_path / "replay" / path.relative_to(out)).read_bytes(), path

    def test_oracle_has_converged(self, tmp_path):
        manifest = generate_dataset(benchmark_scene(), 1, 5, 96, 1, tmp_path / "data")
        assert oracle_gap_db(manifest) < MAX_ORACLE_GAP_DB
