"""
既定設定での学習を伴う受け入れテスト。時間がかかるため `pytest -m slow` で実行します。
"""
import math

import numpy as np
import pytest
from rich.console import Console

from aqmm.binning import BinPartition
from aqmm.evaluation import Workload, average_ll, prediction_error, sampling_report, throughput_bench
from aqmm.grid import GridConfig, GridDistribution, RotationGrid, train_grid_model
from aqmm.sampler import MogQuaternionModel, QuaternionModel
from aqmm.scorer import ScorerConfig, TrainingConfig, train
from aqmm.toy import evaluation_set, optimal_classification_nll, theoretical_optimal_ll

pytestmark = pytest.mark.slow

PARTITION = BinPartition(4096)


@pytest.fixture(scope="module")
def trained(mode_set):
    return train(mode_set, ScorerConfig(), TrainingConfig(), Console(quiet=True))


@pytest.fixture(scope="module")
def model(trained):
    return QuaternionModel(trained.params)


@pytest.fixture(scope="module")
def grid_model(mode_set):
    config = GridConfig(grid_size=65536, n_train=1024)
    result = train_grid_model(mode_set, config, TrainingConfig(max_epochs=30), Console(quiet=True))
    return GridDistribution(result.params, RotationGrid.generate(config.grid_size, config.grid_seed))


def test_classification_loss_reaches_optimum(trained, mode_set):
    assert optimal_classification_nll(mode_set, PARTITION) == pytest.approx(2.5 * math.log(2.0))
    assert trained.best_val_nll == pytest.approx(2.5 * math.log(2.0), abs=0.05)


def test_average_ll_is_close_to_optimum(model, mode_set):
    report = average_ll(model, evaluation_set(mode_set))
    assert report.non_finite == []
    assert report.average_ll > 12.38
    optimum = theoretical_optimal_ll(mode_set, PARTITION)
    assert optimum - 1.0 <= report.average_ll <= optimum + 1e-6


def test_sampling_fidelity(model, mode_set):
    report = sampling_report(model, mode_set, 40_000, np.random.default_rng(0), PARTITION)
    assert report.invalid_rate <= 0.005
    assert max(report.tvd) <= 0.05
    assert report.mean_distance_deg <= 0.5


def test_predictions_land_on_modes(model, mode_set):
    report = prediction_error(model, mode_set)
    assert report.per_viewpoint_deg[0] < 1.0


def test_grid_baseline_contrast(model, grid_model, mode_set):
    report = average_ll(grid_model, evaluation_set(mode_set))
    assert report.average_ll <= grid_model.max_ll
    grid_samples = sampling_report(grid_model, mode_set, 4000, np.random.default_rng(1))
    model_samples = sampling_report(model, mode_set, 4000, np.random.default_rng(1))
    assert grid_samples.mean_distance_deg > model_samples.mean_distance_deg


def test_mog_head_is_worse(model, mode_set):
    result = train(mode_set, ScorerConfig(head="mog", n_components=512), TrainingConfig(), Console(quiet=True))
    eval_set = evaluation_set(mode_set)
    mog_ll = average_ll(MogQuaternionModel(result.params), eval_set).average_ll
    assert mog_ll <= average_ll(model, eval_set).average_ll - 5.0


def test_evaluation_time_scaling(model, grid_model, mode_set):
    """グリッドの評価時間は M に比例し、スコアラーの評価時間は M に依存しない"""
    base = grid_model.grid.size
    baselines = [
        GridDistribution(grid_model.params, RotationGrid.generate(m, grid_model.grid.seed)) for m in (base, 2 * base)
    ]
    record = throughput_bench(model, mode_set, Workload(n_eval=64, n_sample=64, n_predict=6), Console(quiet=True),
                              baselines=baselines)
    small, large = record.baselines
    assert large["eval_seconds"] / small["eval_seconds"] == pytest.approx(2.0, rel=0.25)
    assert large["model_eval_seconds"] / small["model_eval_seconds"] == pytest.approx(1.0, rel=0.1)
