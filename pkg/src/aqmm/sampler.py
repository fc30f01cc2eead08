"""
学習済みスコアラーからのサンプリング、貪欲予測、厳密な対数密度。

サンプリングは 3 ステップでビン (文) を決めた後、セル ∩ 単位球 上で一様に棄却サンプリングします。
スコアラーは各ステップで一度だけ実行し、棄却された候補に対しては再実行しません。
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import scorer
from .binning import illegal_masks, sentence_of, strictly_illegal_mask
from .density import MoGHeadOutput, full_log_density, mog_full_log_density, mog_q_of_s
from .errors import InvalidInputError, SamplingError
from .scorer import (
    ConditioningCache,
    ScorerParameters,
    forward_logits,
    masked_log_probs,
    score_step,
    score_step_mog,
    step_masks,
)
from .so3 import canonicalize

REJECTION_CAP = 1_000_000
_REJECTION_CHUNK = 1024


@dataclass(frozen=True)
class SampleTrace:
    sentence: np.ndarray
    q_c_hats: np.ndarray
    cell_edges: np.ndarray
    point: np.ndarray
    rejections: int


def conditioning_cache(params: ScorerParameters, viewpoint: int) -> ConditioningCache:
    """視点の文脈射影を一度だけ計算します。パラメータが更新されると無効になります。"""
    if not 0 <= viewpoint < params.config.n_viewpoints:
        raise InvalidInputError(f"Unknown viewpoint id {viewpoint!r}.")
    return ConditioningCache(viewpoint, params.version, scorer.context_projection(params, [viewpoint]))


def _categorical(log_probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cdf > u となる最初のビン。確率ゼロのビンは選ばれない
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    k = np.sum(cdf <= u[..., None] * cdf[..., -1:], axis=-1)
    return np.minimum(k, log_probs.shape[-1] - 1)


def naive_illegal_mask(prev_values, partition) -> np.ndarray:
    """
    前の成分の連続値を使う素朴な判定。学習データの文でも不正扱いになることがあるため、
    サンプリングには strictly_illegal_mask を使います。
    """
    prev_sq = float(np.sum(np.square(np.asarray(prev_values, dtype=np.float64))))
    return partition.min_magnitudes_sq + prev_sq > 1.0


def _reject_into_cell(lower: np.ndarray, upper: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    attempts = 0
    while attempts < REJECTION_CAP:
        n = min(_REJECTION_CHUNK, REJECTION_CAP - attempts)
        candidates = rng.uniform(lower, upper, size=(n, 3))
        inside = np.flatnonzero(np.sum(candidates * candidates, axis=-1) <= 1.0)
        if inside.size:
            return candidates[inside[0]], attempts + int(inside[0])
        attempts += n
    raise SamplingError(
        f"Rejection sampling exceeded {REJECTION_CAP} attempts in cell "
        f"x=[{lower[0]:.6g}, {upper[0]:.6g}) y=[{lower[1]:.6g}, {upper[1]:.6g}) z=[{lower[2]:.6g}, {upper[2]:.6g})."
    )


def _complete(xyz: np.ndarray) -> np.ndarray:
    w = np.sqrt(np.clip(1.0 - np.sum(xyz * xyz, axis=-1, keepdims=True), 0.0, None))
    return canonicalize(np.concatenate([xyz, w], axis=-1))


def sample_quaternion(
    params: ScorerParameters, viewpoint: int, rng: np.random.Generator, cache: Optional[ConditioningCache] = None
) -> tuple[np.ndarray, SampleTrace]:
    if cache is None:
        cache = conditioning_cache(params, viewpoint)
    partition = params.config.partition
    bins: list[int] = []
    hats: list[float] = []
    for step in range(3):
        log_probs = masked_log_probs(score_step(params, viewpoint, step, hats, cache), strictly_illegal_mask(bins, partition))
        k = int(_categorical(log_probs, np.array(rng.random())))
        bins.append(k)
        hats.append(float(rng.uniform(partition.lower[k], partition.upper[k])))

    sentence = np.array(bins)
    lower, upper = partition.lower[sentence], partition.upper[sentence]
    point, rejections = _reject_into_cell(lower, upper, rng)
    trace = SampleTrace(sentence, np.array(hats), np.stack([lower, upper], axis=-1), point, rejections)
    return _complete(point), trace


def sample_quaternions(params: ScorerParameters, viewpoints, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """sample_quaternion のバッチ版。戻り値は (qs, sentences)。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    n = len(viewpoints)
    partition = params.config.partition
    context = scorer.context_projection(params, viewpoints)
    sentences = np.zeros((n, 3), dtype=np.int64)
    hats = np.zeros((n, 2))
    prefix_sq = np.zeros(n)
    for step in range(3):
        logits = forward_logits(params, viewpoints, np.full(n, step), hats, context)
        log_probs = masked_log_probs(logits, illegal_masks(prefix_sq, partition))
        k = _categorical(log_probs, rng.random(n))
        sentences[:, step] = k
        prefix_sq += partition.min_magnitudes_sq[k]
        draws = rng.uniform(partition.lower[k], partition.upper[k])
        if step < 2:
            hats[:, step] = draws

    lower, upper = partition.lower[sentences], partition.upper[sentences]
    points = np.zeros((n, 3))
    pending = np.arange(n)
    attempts = 0
    while pending.size:
        if attempts >= REJECTION_CAP:
            bad = sentences[pending[0]]
            raise SamplingError(f"Rejection sampling exceeded {REJECTION_CAP} attempts in cell {bad.tolist()}.")
        candidates = rng.uniform(lower[pending], upper[pending])
        ok = np.sum(candidates * candidates, axis=-1) <= 1.0
        points[pending[ok]] = candidates[ok]
        pending = pending[~ok]
        attempts += 1
    return _complete(points), sentences


def _midpoint_completion(mids: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(mids, axis=-1, keepdims=True)
    mids = np.where(norm > 1.0, mids / np.where(norm > 1.0, norm, 1.0), mids)
    return _complete(mids)


def predict_quaternion(params: ScorerParameters, viewpoint: int, cache: Optional[ConditioningCache] = None) -> np.ndarray:
    """各ステップで最大確率のビン (同点なら小さい番号) を選び、その中点を使います。"""
    partition = params.config.partition
    bins: list[int] = []
    mids: list[float] = []
    for step in range(3):
        log_probs = masked_log_probs(score_step(params, viewpoint, step, mids, cache), strictly_illegal_mask(bins, partition))
        k = int(np.argmax(log_probs))
        bins.append(k)
        mids.append(float(partition.midpoints[k]))
    return _midpoint_completion(np.array(mids))


def predict_quaternions(params: ScorerParameters, viewpoints) -> np.ndarray:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    n = len(viewpoints)
    partition = params.config.partition
    context = scorer.context_projection(params, viewpoints)
    mids = np.zeros((n, 3))
    prefix_sq = np.zeros(n)
    for step in range(3):
        logits = forward_logits(params, viewpoints, np.full(n, step), mids[:, :2], context)
        k = np.argmax(masked_log_probs(logits, illegal_masks(prefix_sq, partition)), axis=-1)
        prefix_sq += partition.min_magnitudes_sq[k]
        mids[:, step] = partition.midpoints[k]
    return _midpoint_completion(mids)


def _step_logits(params: ScorerParameters, viewpoints: np.ndarray, qs: np.ndarray) -> np.ndarray:
    # 1 回の順伝播で 3 ステップ分を評価。形状 (B, 3, D)
    rows_v, steps, prev = scorer.step_inputs(viewpoints, qs)
    out = forward_logits(params, rows_v, steps, prev)
    return out.reshape(len(viewpoints), 3, -1)


def log_densities(params: ScorerParameters, viewpoints, qs, chunk: int = 4096) -> np.ndarray:
    """クエリ回転の厳密な対数密度 (nats)。ビン数に依存するのは 3 回の softmax だけです。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = canonicalize(qs)
    if params.config.head != "binned":
        return mog_log_densities(params, viewpoints, qs, chunk)
    partition = params.config.partition
    out = np.empty(len(viewpoints))
    for start in range(0, len(viewpoints), chunk):
        v, q = viewpoints[start : start + chunk], qs[start : start + chunk]
        logits = _step_logits(params, v, q)
        masks = step_masks(sentence_of(q, partition), partition).reshape(logits.shape)
        out[start : start + chunk] = full_log_density(q, masked_log_probs(logits, masks), partition)
    return out


def log_density(params: ScorerParameters, viewpoint: int, q) -> float:
    return float(log_densities(params, [viewpoint], np.asarray(q, dtype=np.float64)[None])[0])


def mog_log_densities(params: ScorerParameters, viewpoints, qs, chunk: int = 4096) -> np.ndarray:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = canonicalize(qs)
    out = np.empty(len(viewpoints))
    for start in range(0, len(viewpoints), chunk):
        v, q = viewpoints[start : start + chunk], qs[start : start + chunk]
        head = MoGHeadOutput.from_raw(_step_logits(params, v, q))
        steps = [MoGHeadOutput(head.log_weights[:, c], head.means[:, c], head.log_scales[:, c]) for c in range(3)]
        out[start : start + chunk] = mog_full_log_density(q, steps)
    return out


def sample_quaternion_mog(params: ScorerParameters, viewpoint: int, rng: np.random.Generator) -> np.ndarray:
    """MoG ヘッドのデバッグ用サンプラー。成分ごとに s 空間で混合正規分布から引きます。"""
    prev: list[float] = []
    for step in range(3):
        head = score_step_mog(params, viewpoint, step, prev)
        j = int(_categorical(head.log_weights, np.array(rng.random())))
        s = rng.normal(head.means[j], head.scales[j])
        u = np.sqrt(max(0.0, 1.0 - sum(p * p for p in prev)))
        prev.append(float(mog_q_of_s(s, u)))
    return _complete(np.array(prev))


# --- Model adapters used by evaluation ---

class QuaternionModel:
    """binned ヘッドのスコアラーを評価インターフェースに合わせるラッパー。視点ごとのキャッシュを保持します。"""

    kind = "aquamam"

    def __init__(self, params: ScorerParameters):
        if params.config.head != "binned":
            raise InvalidInputError("QuaternionModel requires a binned head.")
        self.params = params
        self._caches: dict[int, ConditioningCache] = {}

    @property
    def partition(self):
        return self.params.config.partition

    def cache_for(self, viewpoint: int) -> ConditioningCache:
        cache = self._caches.get(viewpoint)
        if cache is None or cache.version != self.params.version:
            cache = self._caches[viewpoint] = conditioning_cache(self.params, viewpoint)
        return cache

    def log_density(self, viewpoint: int, q) -> float:
        return log_density(self.params, viewpoint, q)

    def log_densities(self, viewpoints, qs) -> np.ndarray:
        return log_densities(self.params, viewpoints, qs)

    def sample(self, viewpoint: int, rng: np.random.Generator) -> np.ndarray:
        return sample_quaternion(self.params, viewpoint, rng, self.cache_for(viewpoint))[0]

    def sample_many(self, viewpoints, rng: np.random.Generator) -> np.ndarray:
        return sample_quaternions(self.params, viewpoints, rng)[0]

    def predict(self, viewpoint: int) -> np.ndarray:
        return predict_quaternion(self.params, viewpoint, self.cache_for(viewpoint))

    def predict_many(self, viewpoints) -> np.ndarray:
        return predict_quaternions(self.params, viewpoints)


class MogQuaternionModel:
    kind = "aquamam-mog"

    def __init__(self, params: ScorerParameters):
        if params.config.head != "mog":
            raise InvalidInputError("MogQuaternionModel requires a mog head.")
        self.params = params

    def log_density(self, viewpoint: int, q) -> float:
        return float(self.log_densities([viewpoint], np.asarray(q, dtype=np.float64)[None])[0])

    def log_densities(self, viewpoints, qs) -> np.ndarray:
        return mog_log_densities(self.params, viewpoints, qs)

    def sample_many(self, viewpoints, rng: np.random.Generator) -> np.ndarray:
        return np.stack([sample_quaternion_mog(self.params, int(v), rng) for v in viewpoints])
