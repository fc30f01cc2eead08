import csv
import math

import numpy as np
import pytest

from aqmm.binning import BinPartition, sentence_of
from aqmm.density import full_log_density
from aqmm.errors import InvalidInputError
from aqmm.evaluation import (
    VIZ_HEADER,
    VizPoint,
    Workload,
    average_ll,
    export_viz,
    prediction_error,
    sampling_report,
    summarize_samples,
    throughput_bench,
    viz_points,
)
from aqmm.grid import GridConfig, GridDistribution, GridParameters, RotationGrid
from aqmm.sampler import QuaternionModel
from aqmm.so3 import SO3_VOLUME, sample_uniform_rotation
from aqmm.toy import evaluation_set, theoretical_optimal_ll


class UniformModel:
    """SO(3) 上の一様分布。"""

    kind = "uniform"

    def log_densities(self, viewpoints, qs):
        return np.full(len(viewpoints), -math.log(SO3_VOLUME))

    def sample_many(self, viewpoints, rng):
        return sample_uniform_rotation(rng, len(viewpoints))


class PerfectModel:
    """モード集合そのものから引く理想的なサンプラー。"""

    kind = "perfect"

    def __init__(self, mode_set):
        self.mode_set = mode_set

    def log_densities(self, viewpoints, qs):
        return np.zeros(len(viewpoints))

    def sample_many(self, viewpoints, rng):
        return np.stack([self.mode_set.modes[v][rng.integers(len(self.mode_set.modes[v]))] for v in viewpoints])

    def predict_many(self, viewpoints):
        return np.stack([self.mode_set.modes[v][0] for v in viewpoints])


class OracleModel:
    """視点ごとのモードの文の経験分布をそのまま混合比にした最適モデル。"""

    kind = "oracle"

    def __init__(self, mode_set, partition):
        self.mode_set = mode_set
        self.partition = partition

    def log_densities(self, viewpoints, qs):
        n = self.partition.n_bins
        log_pis = np.full((len(viewpoints), 3, n), -np.inf)
        for j, (v, sentence) in enumerate(zip(viewpoints, sentence_of(qs, self.partition))):
            mode_sentences = sentence_of(self.mode_set.modes[v], self.partition)
            for c in range(3):
                same_prefix = np.all(mode_sentences[:, :c] == sentence[:c], axis=-1)
                counts = np.bincount(mode_sentences[same_prefix, c], minlength=n)
                with np.errstate(divide="ignore"):
                    log_pis[j, c] = np.log(counts / counts.sum())
        return full_log_density(qs, log_pis, self.partition)


def test_uniform_model_average_ll(mode_set):
    report = average_ll(UniformModel(), evaluation_set(mode_set))
    assert report.average_ll == pytest.approx(-2.2894, abs=1e-3)
    assert len(report.per_viewpoint) == 6
    assert report.non_finite == []


def test_average_ll_reports_offenders(mode_set):
    class Broken(UniformModel):
        def log_densities(self, viewpoints, qs):
            out = super().log_densities(viewpoints, qs)
            out[viewpoints == 3] = -np.inf
            return out

    report = average_ll(Broken(), evaluation_set(mode_set))
    assert report.average_ll == -np.inf
    assert len(report.non_finite) == 8
    assert all(o["viewpoint"] == 3 for o in report.non_finite)
    assert report.to_dict()["average_ll"] == "-inf"


def test_perfect_sampler_report(mode_set, rng):
    report = sampling_report(PerfectModel(mode_set), mode_set, 60_000, rng, BinPartition(4096))
    assert report.invalid_count == 0
    assert report.max_distance_deg == pytest.approx(0.0, abs=1e-5)
    assert max(report.tvd) < 0.05
    for v, p in enumerate(report.proportions):
        assert sum(p) == pytest.approx(1.0)
        assert len(p) == 2**v


def test_uniform_sampler_is_mostly_invalid(mode_set, rng):
    report = sampling_report(UniformModel(), mode_set, 2000, rng, BinPartition(4096))
    assert report.invalid_rate > 0.99
    assert max(report.tvd) > 0.9
    assert report.to_dict()["invalid_rate"] == report.invalid_rate


def test_sampling_report_rejects_empty(mode_set, rng):
    with pytest.raises(InvalidInputError):
        sampling_report(UniformModel(), mode_set, 0, rng)


def test_summarize_without_partition(mode_set):
    viewpoints = np.array([5, 5])
    report = summarize_samples(mode_set, viewpoints, mode_set.modes[5][:2])
    assert report.invalid_count == 0
    assert report.proportions[5][0] == 0.5


def test_prediction_error(mode_set):
    report = prediction_error(PerfectModel(mode_set), mode_set)
    assert report.mean_deg == pytest.approx(0.0, abs=1e-5)
    assert len(report.per_viewpoint_deg) == 6
    assert len(report.predictions) == 6


def test_export_viz(tmp_path, rng):
    q = sample_uniform_rotation(rng)
    path = tmp_path / "viz" / "points.csv"
    export_viz(path, [VizPoint(q, -1.5, "sample"), VizPoint(np.array([0.0, 0.0, 0.0, 1.0]), 0.25, "uniform")])
    with path.open(encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == VIZ_HEADER
    assert len(rows) == 3
    assert rows[1][3] == "-1.5"
    assert [float(x) for x in rows[2][:3]] == [0.0, 0.0, 0.0]


def test_viz_point_composition(mode_set, rng):
    points = viz_points(UniformModel(), mode_set, 4, 1000, rng)
    tags = [p.tag for p in points]
    assert tags.count("ground_truth") == 1
    assert tags.count("sample") == 499
    assert tags.count("uniform") == 500
    truth = next(p for p in points if p.tag == "ground_truth")
    assert np.any(np.all(mode_set.modes[4] == truth.q, axis=-1))


def test_viz_points_needs_two(mode_set, rng):
    with pytest.raises(InvalidInputError):
        viz_points(UniformModel(), mode_set, 0, 1, rng)
    assert len(viz_points(UniformModel(), mode_set, 0, 2, rng)) == 2


def test_throughput_bench(mode_set, tiny_params, quiet_console):
    grid_config = GridConfig(grid_size=64, n_train=8, n_freqs=2, d_ctx=8, hidden=(16, 16))
    baseline = GridDistribution(
        GridParameters.initialize(grid_config, np.random.default_rng(0)), RotationGrid.generate(64, seed=0)
    )
    record = throughput_bench(
        QuaternionModel(tiny_params),
        mode_set,
        Workload(n_eval=4, n_sample=16, n_predict=6, seed=0),
        quiet_console,
        config_digest="abc",
        baselines=[baseline],
    )
    data = record.to_dict()
    assert data["model_kind"] == "aquamam"
    assert data["config_digest"] == "abc"
    assert {"eval_per_sec", "sample_per_sec", "predict_per_sec", "predict_cached_per_sec"} <= set(data["throughput"])
    assert data["baselines"][0]["grid_size"] == 64
    assert np.isfinite(data["average_ll"])


def test_oracle_model_attains_theoretical_optimum(mode_set):
    partition = BinPartition(4096)
    report = average_ll(OracleModel(mode_set, partition), evaluation_set(mode_set))
    assert report.average_ll == pytest.approx(theoretical_optimal_ll(mode_set, partition), abs=1e-9)


@pytest.mark.parametrize("n_bins", [2, 64])
def test_oracle_model_handles_sentence_collisions(mode_set, n_bins):
    partition = BinPartition(n_bins)
    report = average_ll(OracleModel(mode_set, partition), evaluation_set(mode_set))
    assert report.average_ll == pytest.approx(theoretical_optimal_ll(mode_set, partition), abs=1e-9)


def test_untrained_model_stays_below_optimum(mode_set, tiny_params):
    report = average_ll(QuaternionModel(tiny_params), evaluation_set(mode_set))
    assert report.average_ll <= theoretical_optimal_ll(mode_set, tiny_params.config.partition) + 1e-6
