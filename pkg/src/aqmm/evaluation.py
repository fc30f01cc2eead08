"""
評価指標と実験ハーネス。

モデルは Protocol で受け取るので、スコアラー (QuaternionModel) とグリッド基準モデル
(GridDistribution) のどちらでも同じ関数で評価できます。
"""
import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from rich.console import Console

from .binning import BinPartition, sentence_of
from .errors import InvalidInputError
from .sampler import predict_quaternion
from .so3 import geodesic_distance, quat_to_rotation_vector, sample_uniform_rotation
from .toy import EvaluationSet, ToyModeSet, draw_samples, evaluation_set


class DensityModel(Protocol):
    kind: str

    def log_densities(self, viewpoints, qs) -> np.ndarray: ...


class SamplerModel(Protocol):
    def sample_many(self, viewpoints, rng: np.random.Generator) -> np.ndarray: ...


class Predictor(Protocol):
    def predict_many(self, viewpoints) -> np.ndarray: ...


# --- Log-likelihood ---

@dataclass(frozen=True)
class LikelihoodReport:
    average_ll: float
    per_viewpoint: list[float]
    non_finite: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "average_ll": _json_float(self.average_ll),
            "per_viewpoint": [_json_float(v) for v in self.per_viewpoint],
            "non_finite": self.non_finite,
        }


def _json_float(x: float):
    return x if np.isfinite(x) else str(x)


def average_ll(model: DensityModel, eval_set: EvaluationSet) -> LikelihoodReport:
    """192 エントリの重み付き平均対数尤度。-inf のエントリがあれば結果も -inf で、該当エントリを列挙します。"""
    values = np.asarray(model.log_densities(eval_set.viewpoints, eval_set.qs), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    offenders = [
        {"viewpoint": int(eval_set.viewpoints[j]), "entry": int(j), "log_density": str(values[j])} for j in bad
    ]
    per_viewpoint = [float(np.mean(values[eval_set.viewpoints == v])) for v in np.unique(eval_set.viewpoints)]
    mean = -np.inf if bad.size else eval_set.weighted_mean(values)
    return LikelihoodReport(float(mean), per_viewpoint, offenders)


# --- Sampling fidelity ---

@dataclass(frozen=True)
class SamplingReport:
    n_samples: int
    proportions: list[list[float]]
    tvd: list[float]
    mean_distance_deg: float
    max_distance_deg: float
    invalid_count: int

    @property
    def invalid_rate(self) -> float:
        return self.invalid_count / self.n_samples

    def to_dict(self) -> dict:
        data = asdict(self)
        data["invalid_rate"] = self.invalid_rate
        return data


def nearest_modes(mode_set: ToyModeSet, viewpoints, qs) -> tuple[np.ndarray, np.ndarray]:
    """各サンプルの視点内で測地距離が最小のモード番号と、その距離 (rad)。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    idx = np.zeros(len(viewpoints), dtype=np.int64)
    dist = np.zeros(len(viewpoints))
    for v in np.unique(viewpoints):
        rows = np.flatnonzero(viewpoints == v)
        d = geodesic_distance(qs[rows][:, None, :], mode_set.modes[v][None, :, :])
        idx[rows] = np.argmin(d, axis=-1)
        dist[rows] = d[np.arange(len(rows)), idx[rows]]
    return idx, dist


def valid_sentences(mode_set: ToyModeSet, viewpoints, qs, partition: BinPartition) -> np.ndarray:
    """サンプルの文がその視点のいずれかのモードの文と一致するか。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    sentences = sentence_of(qs, partition)
    mode_sentences = mode_set.sentences(partition)
    valid = np.zeros(len(viewpoints), dtype=bool)
    for v in np.unique(viewpoints):
        rows = np.flatnonzero(viewpoints == v)
        valid[rows] = np.any(np.all(sentences[rows][:, None, :] == mode_sentences[v][None], axis=-1), axis=-1)
    return valid


def sampling_report(
    model: SamplerModel,
    mode_set: ToyModeSet,
    n_samples: int,
    rng: np.random.Generator,
    partition: Optional[BinPartition] = None,
) -> SamplingReport:
    """
    視点を階層的に引いてサンプルし、最近傍モードへ割り当てて集計します。
    partition が None なら文の一致判定は行いません (全サンプル有効)。
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1.")
    viewpoints = rng.integers(0, mode_set.n_viewpoints, size=n_samples)
    return summarize_samples(mode_set, viewpoints, model.sample_many(viewpoints, rng), partition)


def summarize_samples(
    mode_set: ToyModeSet, viewpoints, qs, partition: Optional[BinPartition] = None
) -> SamplingReport:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    n_samples = len(viewpoints)
    idx, dist = nearest_modes(mode_set, viewpoints, qs)
    valid = np.ones(n_samples, dtype=bool) if partition is None else valid_sentences(mode_set, viewpoints, qs, partition)

    proportions, tvd = [], []
    for v, modes in enumerate(mode_set.modes):
        in_v = viewpoints == v
        total = max(int(in_v.sum()), 1)
        counts = np.bincount(idx[in_v & valid], minlength=len(modes))
        p = counts / total
        invalid_share = float(np.sum(in_v & ~valid)) / total
        proportions.append(p.tolist())
        tvd.append(float(0.5 * (np.sum(np.abs(p - 1.0 / len(modes))) + invalid_share)))

    degrees = np.degrees(dist)
    return SamplingReport(
        n_samples=n_samples,
        proportions=proportions,
        tvd=tvd,
        mean_distance_deg=float(np.mean(degrees)),
        max_distance_deg=float(np.max(degrees)),
        invalid_count=int(np.sum(~valid)),
    )


# --- Prediction ---

@dataclass(frozen=True)
class PredictionReport:
    per_viewpoint_deg: list[float]
    mean_deg: float
    predictions: list[list[float]]

    def to_dict(self) -> dict:
        return asdict(self)


def prediction_error(model: Predictor, mode_set: ToyModeSet) -> PredictionReport:
    """貪欲予測と最も近い真のモードとの測地距離 (度)。視点ごとと全体平均。"""
    viewpoints = np.arange(mode_set.n_viewpoints)
    predictions = model.predict_many(viewpoints)
    _, dist = nearest_modes(mode_set, viewpoints, predictions)
    degrees = np.degrees(dist)
    # 評価集合では各視点の重みが等しい
    return PredictionReport(degrees.tolist(), float(np.mean(degrees)), predictions.tolist())


# --- Throughput ---

@dataclass(frozen=True)
class Workload:
    n_eval: int = 64
    n_sample: int = 1024
    n_predict: int = 256
    seed: int = 0


@dataclass
class ExperimentRecord:
    model_kind: str
    config_digest: str
    seeds: dict
    average_ll: float
    mean_prediction_error_deg: float
    throughput: dict
    wall_clock_seconds: float
    baselines: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["average_ll"] = _json_float(self.average_ll)
        data["mean_prediction_error_deg"] = _json_float(self.mean_prediction_error_deg)
        return data


def _timed(fn) -> float:
    started = time.perf_counter()
    fn()
    return time.perf_counter() - started


def _eval_seconds(model: DensityModel, viewpoints, qs) -> float:
    # クエリ 1 件ずつ評価する (入力ごとの条件付けを想定)
    return _timed(lambda: [model.log_densities(viewpoints[j : j + 1], qs[j : j + 1]) for j in range(len(viewpoints))])


def throughput_bench(
    model,
    mode_set: ToyModeSet,
    workload: Workload,
    console: Console,
    config_digest: str = "",
    baselines: Sequence = (),
) -> ExperimentRecord:
    """
    評価・サンプリング・予測のスループット (件/秒) を測ります。
    baselines には異なるグリッドサイズの GridDistribution を渡し、評価時間のスケーリングを記録します。
    """
    started = time.perf_counter()
    rng = np.random.default_rng(workload.seed)
    viewpoints, qs = draw_samples(mode_set, rng, workload.n_eval)
    eval_set = evaluation_set(mode_set)

    # ウォームアップ
    model.log_densities(viewpoints[:1], qs[:1])

    console.print(f"[cyan]Benchmarking {model.kind}[/cyan] ({workload.n_eval} eval, {workload.n_sample} sample, {workload.n_predict} predict)")
    eval_s = _eval_seconds(model, viewpoints, qs)
    sample_s = _timed(lambda: model.sample_many(draw_samples(mode_set, rng, workload.n_sample)[0], rng))
    throughput = {
        "eval_per_sec": workload.n_eval / eval_s,
        "sample_per_sec": workload.n_sample / sample_s,
        "eval_seconds": eval_s,
    }
    predict_vp = np.arange(workload.n_predict) % mode_set.n_viewpoints
    # MoG ヘッドは predict_many を持たない
    if hasattr(model, "predict_many"):
        throughput["predict_per_sec"] = workload.n_predict / _timed(lambda: model.predict_many(predict_vp))
    if hasattr(model, "cache_for"):
        # 視点キャッシュの有無による単一予測の比較 (記録のみ)
        single_vp = [int(v) for v in predict_vp]
        uncached_s = _timed(lambda: [predict_quaternion(model.params, v) for v in single_vp])
        cached_s = _timed(lambda: [model.predict(v) for v in single_vp])
        throughput["predict_uncached_per_sec"] = len(single_vp) / uncached_s
        throughput["predict_cached_per_sec"] = len(single_vp) / cached_s

    rows = []
    for baseline in baselines:
        baseline.log_densities(viewpoints[:1], qs[:1])
        base_s = _eval_seconds(baseline, viewpoints, qs)
        again_s = _eval_seconds(model, viewpoints, qs)
        rows.append({
            "grid_size": baseline.grid.size,
            "eval_seconds": base_s,
            "eval_per_sec": workload.n_eval / base_s,
            "model_eval_seconds": again_s,
            "throughput_ratio": base_s / again_s,
        })
        console.print(
            f"  grid M={baseline.grid.size:,}: {base_s:.3f}s vs {again_s:.3f}s "
            f"([green]{base_s / again_s:.1f}x[/green])"
        )

    ll = average_ll(model, eval_set).average_ll
    pred = prediction_error(model, mode_set).mean_deg if hasattr(model, "predict_many") else float("nan")
    return ExperimentRecord(
        model_kind=model.kind,
        config_digest=config_digest,
        seeds={"workload": workload.seed, "modes": mode_set.seed},
        average_ll=ll,
        mean_prediction_error_deg=pred,
        throughput=throughput,
        wall_clock_seconds=time.perf_counter() - started,
        baselines=rows,
    )


# --- Visualization export ---

@dataclass(frozen=True)
class VizPoint:
    q: np.ndarray
    log_density: float
    tag: str


VIZ_HEADER = ("x", "y", "z", "log_density", "tag")


def export_viz(path: Path, points: Sequence[VizPoint]):
    """回転ベクトル (x, y, z)、対数密度、タグの CSV を書きます。"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(VIZ_HEADER)
        for point in points:
            x, y, z = quat_to_rotation_vector(point.q)
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(point.log_density)), point.tag])


def viz_points(model, mode_set: ToyModeSet, viewpoint: int, n: int, rng: np.random.Generator) -> list[VizPoint]:
    """真の回転 1 点、モデルからのサンプル n/2 - 1 点、一様な回転 n/2 点。"""
    if n < 2:
        raise InvalidInputError("A visualization needs at least 2 points.")
    modes = mode_set.modes[viewpoint]
    truth = modes[rng.integers(len(modes))][None]
    n_model = n // 2 - 1
    samples = model.sample_many(np.full(n_model, viewpoint), rng) if n_model else np.empty((0, 4))
    uniform = sample_uniform_rotation(rng, n - n // 2)
    groups = [("ground_truth", truth), ("sample", samples), ("uniform", uniform)]

    points = []
    for tag, qs in groups:
        if len(qs) == 0:
            continue
        log_p = model.log_densities(np.full(len(qs), viewpoint), qs)
        points += [VizPoint(q, float(lp), tag) for q, lp in zip(qs, log_p)]
    return points
