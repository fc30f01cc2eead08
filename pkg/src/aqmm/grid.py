"""
グリッド型の基準モデル。

(視点, 回転) の組にスカラーのスコアを付けるネットワークを負例サンプリングで学習し、
評価時はグリッド上の softmax を体積 π²/(M+1) で割って密度とします。
クエリ回転はグリッドに挿入してからスコアを正規化します。
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from rich.console import Console
from scipy.special import logsumexp

from .errors import InvalidInputError
from .scorer import (
    ParameterSet,
    TrainingConfig,
    TrainingResult,
    adam_update,
    check_finite,
    gelu,
    gelu_grad,
    positional_encode,
    run_training,
    uniform_init,
)
from .so3 import SO3_VOLUME, canonicalize, quat_to_matrix, sample_uniform_rotation
from .toy import ToyModeSet

DEFAULT_CHUNK = 8192

# 学習時に 1 度に展開する (サンプル, 候補) 組の上限
_PAIR_BUDGET = 1 << 16


@dataclass(frozen=True)
class GridConfig:
    grid_size: int = 65536
    n_train: int = 4096
    grid_seed: int = 0
    n_freqs: int = 6
    d_ctx: int = 64
    hidden: tuple[int, int] = (128, 128)
    n_viewpoints: int = 6

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.grid_size < 2:
            raise InvalidInputError("A rotation grid needs at least 2 cells.")
        if self.n_train < 2:
            raise InvalidInputError("Negative sampling needs n_train >= 2 (one positive plus negatives).")
        if len(self.hidden) != 2 or min(self.n_freqs, self.d_ctx, *self.hidden, self.n_viewpoints) <= 0:
            raise InvalidInputError("Grid model dimensions must be positive with two hidden layers.")

    @property
    def feature_width(self) -> int:
        return 9 * (1 + 2 * self.n_freqs)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        return data


class GridParameters(ParameterSet):
    ORDER = ("embed", "w_ctx", "b_ctx", "w_rot", "w_hidden", "b_hidden", "w_out", "b_out")

    @staticmethod
    def shapes(config: GridConfig) -> dict[str, tuple[int, ...]]:
        h1, h2 = config.hidden
        return {
            "embed": (config.n_viewpoints, config.d_ctx),
            "w_ctx": (config.d_ctx, h1),
            "b_ctx": (h1,),
            "w_rot": (config.feature_width, h1),
            "w_hidden": (h1, h2),
            "b_hidden": (h2,),
            "w_out": (h2, 1),
            "b_out": (1,),
        }

    @classmethod
    def initialize(cls, config: GridConfig, rng: np.random.Generator, dtype=np.float32) -> "GridParameters":
        h1, h2 = config.hidden
        first = config.d_ctx + config.feature_width
        fan_in = {"embed": 1, "w_ctx": first, "b_ctx": first, "w_rot": first,
                  "w_hidden": h1, "b_hidden": h1, "w_out": h2, "b_out": h2}
        arrays = {name: uniform_init(rng, shape, fan_in[name], dtype) for name, shape in cls.shapes(config).items()}
        return cls(config, arrays)


def rotation_features(q, n_freqs: int) -> np.ndarray:
    """回転行列の 9 成分を位置エンコードして並べたもの。形状 (..., 9(1+2L))。"""
    flat = np.clip(quat_to_matrix(q).reshape(*np.shape(q)[:-1], 9), -1.0, 1.0)
    return positional_encode(flat, n_freqs).reshape(*flat.shape[:-1], -1)


@dataclass(frozen=True, eq=False)
class RotationGrid:
    quats: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.quats) < 2:
            raise InvalidInputError("A rotation grid needs at least 2 cells.")

    @classmethod
    def generate(cls, size: int, seed: int) -> "RotationGrid":
        """Haar 一様な乱数グリッド。セル体積 π²/M は期待値として成り立ちます。"""
        if size < 2:
            raise InvalidInputError("A rotation grid needs at least 2 cells.")
        return cls(sample_uniform_rotation(np.random.default_rng(seed), size), seed)

    @property
    def size(self) -> int:
        return len(self.quats)

    @property
    def volume(self) -> float:
        return SO3_VOLUME / self.size

    @cached_property
    def _features(self) -> dict[int, np.ndarray]:
        return {}

    def features(self, n_freqs: int) -> np.ndarray:
        if n_freqs not in self._features:
            self._features[n_freqs] = rotation_features(self.quats, n_freqs)
        return self._features[n_freqs]


def theoretical_max_ll(m: int) -> float:
    """M セルのグリッドで達成できる最大の対数尤度 ln(M/π²)。"""
    if m < 1:
        raise InvalidInputError("Grid size must be >= 1.")
    return math.log(m) - math.log(SO3_VOLUME)


def cells_for_ll(ll: float) -> float:
    """theoretical_max_ll の逆関数 π² e^ll。"""
    return SO3_VOLUME * math.exp(ll)


# --- Scoring ---

@dataclass
class _PairTape:
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray


def _context(params: GridParameters, viewpoints) -> np.ndarray:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    if np.any(viewpoints < 0) or np.any(viewpoints >= params.config.n_viewpoints):
        raise InvalidInputError(f"Unknown viewpoint id; expected 0..{params.config.n_viewpoints - 1}.")
    return params["embed"][viewpoints] @ params["w_ctx"] + params["b_ctx"]


def _pair_scores(params: GridParameters, ctx: np.ndarray, rot_pre: np.ndarray) -> tuple[np.ndarray, _PairTape]:
    # ctx (B, H1) と rot_pre (B or 1, J, H1) から形状 (B, J) のスコア
    pre1 = ctx[:, None, :] + rot_pre
    h1 = gelu(pre1)
    pre2 = h1 @ params["w_hidden"] + params["b_hidden"]
    h2 = gelu(pre2)
    scores = (h2 @ params["w_out"])[..., 0] + params["b_out"][0]
    return scores, _PairTape(pre1, h1, pre2, h2)


def _pair_backward(params: GridParameters, tape: _PairTape, g_scores: np.ndarray) -> tuple[dict, np.ndarray]:
    h1_dim, h2_dim = params.config.hidden
    grads = {
        "w_out": np.einsum("bjh,bj->h", tape.h2, g_scores)[:, None],
        "b_out": np.array([g_scores.sum()], dtype=g_scores.dtype),
    }
    g_pre2 = g_scores[..., None] * params["w_out"][:, 0] * gelu_grad(tape.pre2)
    grads["w_hidden"] = tape.h1.reshape(-1, h1_dim).T @ g_pre2.reshape(-1, h2_dim)
    grads["b_hidden"] = g_pre2.reshape(-1, h2_dim).sum(axis=0)
    g_pre1 = (g_pre2 @ params["w_hidden"].T) * gelu_grad(tape.pre1)
    return grads, g_pre1


def score_rotations(params: GridParameters, viewpoint: int, qs, features: Optional[np.ndarray] = None) -> np.ndarray:
    """1 つの視点に対する回転群のスコア。"""
    if features is None:
        features = rotation_features(canonicalize(qs), params.config.n_freqs)
    ctx = _context(params, [viewpoint])
    rot_pre = (features.astype(params.dtype) @ params["w_rot"])[None]
    return _pair_scores(params, ctx, rot_pre)[0][0].astype(np.float64)


def grid_scores(params: GridParameters, viewpoint: int, grid: RotationGrid,
                threads: Optional[int] = None, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """グリッド全体のスコア。チャンクごとにスレッドプールで計算します。"""
    feats = grid.features(params.config.n_freqs)
    starts = range(0, grid.size, chunk)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda s: score_rotations(params, viewpoint, None, feats[s : s + chunk]), starts)
        return np.concatenate(list(parts))


def grid_log_normalizer(params: GridParameters, viewpoint: int, grid: RotationGrid,
                        threads: Optional[int] = None, chunk: int = DEFAULT_CHUNK) -> float:
    """logsumexp(グリッドのスコア)。チャンクの部分和を最後にまとめます。"""
    feats = grid.features(params.config.n_freqs)
    starts = range(0, grid.size, chunk)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        partial = list(pool.map(
            lambda s: logsumexp(score_rotations(params, viewpoint, None, feats[s : s + chunk])), starts
        ))
    return float(logsumexp(partial))


def grid_log_density(params: GridParameters, viewpoint: int, q, grid: RotationGrid,
                     threads: Optional[int] = None) -> float:
    """ln softmax({q} ∪ grid)[q] - ln(π²/(M+1))。"""
    s_q = float(score_rotations(params, viewpoint, np.asarray(q, dtype=np.float64)[None])[0])
    lse = np.logaddexp(grid_log_normalizer(params, viewpoint, grid, threads), s_q)
    return s_q - lse - math.log(SO3_VOLUME / (grid.size + 1))


def grid_log_densities(params: GridParameters, viewpoints, qs, grid: RotationGrid,
                       threads: Optional[int] = None) -> np.ndarray:
    """grid_log_density のバッチ版。グリッドの正規化項は視点ごとに一度だけ計算します。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = canonicalize(qs)
    out = np.empty(len(viewpoints))
    log_volume = math.log(SO3_VOLUME / (grid.size + 1))
    for v in np.unique(viewpoints):
        rows = np.flatnonzero(viewpoints == v)
        lse_grid = grid_log_normalizer(params, int(v), grid, threads)
        s_q = score_rotations(params, int(v), qs[rows])
        out[rows] = s_q - np.logaddexp(lse_grid, s_q) - log_volume
    return out


def sample_from_grid(params: GridParameters, viewpoint: int, grid: RotationGrid, rng: np.random.Generator,
                     size: Optional[int] = None, threads: Optional[int] = None) -> np.ndarray:
    """グリッド上の softmax からカテゴリカルにセルを選び、その四元数を返します。"""
    scores = grid_scores(params, viewpoint, grid, threads)
    probs = np.exp(scores - logsumexp(scores))
    idx = rng.choice(grid.size, size=size, p=probs / probs.sum())
    return grid.quats[idx]


# --- Training ---

def grid_loss_and_grad(params: GridParameters, viewpoints, qs, negatives) -> tuple[float, dict[str, np.ndarray]]:
    """
    各サンプルの候補 {正解} ∪ negatives に対する交差エントロピー (正解は添字 0)。
    負例はミニバッチ内で共有します。
    """
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    n = len(viewpoints)
    n_freqs = params.config.n_freqs
    dtype = params.dtype
    true_feats = rotation_features(np.asarray(qs, dtype=np.float64), n_freqs).astype(dtype)
    neg_feats = rotation_features(np.asarray(negatives, dtype=np.float64), n_freqs).astype(dtype)
    neg_pre = neg_feats @ params["w_rot"]
    ctx_all = _context(params, viewpoints)
    true_pre_all = true_feats @ params["w_rot"]

    grads = {name: np.zeros_like(a) for name, a in params.arrays.items()}
    g_ctx = np.zeros_like(ctx_all)
    g_true = np.zeros_like(true_pre_all)
    g_neg = np.zeros_like(neg_pre)
    loss = 0.0
    chunk = max(1, _PAIR_BUDGET // (len(negatives) + 1))
    for start in range(0, n, chunk):
        rows = slice(start, start + chunk)
        ctx = ctx_all[rows]
        rot_pre = np.concatenate(
            [true_pre_all[rows][:, None, :], np.broadcast_to(neg_pre, (len(ctx), *neg_pre.shape))], axis=1
        )
        scores, tape = _pair_scores(params, ctx, rot_pre)
        log_probs = scores.astype(np.float64) - logsumexp(scores.astype(np.float64), axis=-1, keepdims=True)
        loss -= float(np.sum(log_probs[:, 0]))
        g_scores = np.exp(log_probs)
        g_scores[:, 0] -= 1.0
        head, g_pre1 = _pair_backward(params, tape, (g_scores / n).astype(dtype))
        for name, g in head.items():
            grads[name] += g
        g_ctx[rows] = g_pre1.sum(axis=1)
        g_true[rows] = g_pre1[:, 0]
        g_neg += g_pre1[:, 1:].sum(axis=0)

    grads["w_rot"] = true_feats.T @ g_true + neg_feats.T @ g_neg
    grads["b_ctx"] = g_ctx.sum(axis=0)
    grads["w_ctx"] = params["embed"][viewpoints].T @ g_ctx
    np.add.at(grads["embed"], viewpoints, g_ctx @ params["w_ctx"].T)
    return loss / n, grads


def grid_training_step(params: GridParameters, state, viewpoints, qs, rng: np.random.Generator) -> float:
    if len(viewpoints) == 0:
        raise InvalidInputError("Minibatch must not be empty.")
    negatives = sample_uniform_rotation(rng, params.config.n_train - 1)
    loss, grads = grid_loss_and_grad(params, viewpoints, qs, negatives)
    check_finite(loss, grads, f"grid optimizer step {state.step + 1}")
    adam_update(params, grads, state)
    return loss


def validation_negatives(config: GridConfig, seed: int) -> np.ndarray:
    return sample_uniform_rotation(np.random.default_rng([seed, 4]), config.n_train - 1)


def grid_validation_nll(params: GridParameters, viewpoints, qs, negatives, batch_size: int = 256) -> float:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    total = 0.0
    for start in range(0, len(viewpoints), batch_size):
        rows = slice(start, start + batch_size)
        loss, _ = grid_loss_and_grad(params, viewpoints[rows], qs[rows], negatives)
        total += loss * len(viewpoints[rows])
    return total / len(viewpoints)


def train_grid_model(mode_set: ToyModeSet, config: GridConfig, training: TrainingConfig,
                     console: Console) -> TrainingResult:
    """負例サンプリングでグリッド基準モデルを学習します。検証は固定の負例集合で行います。"""
    if config.n_viewpoints != mode_set.n_viewpoints:
        raise InvalidInputError(
            f"Grid model has {config.n_viewpoints} viewpoints but the mode set has {mode_set.n_viewpoints}."
        )
    params = GridParameters.initialize(config, np.random.default_rng([training.seed, 0]))
    neg_rng = np.random.default_rng([training.seed, 3])
    val_negatives = validation_negatives(config, training.seed)
    return run_training(
        params,
        mode_set,
        training,
        lambda p, s, v, q: grid_training_step(p, s, v, q, neg_rng),
        lambda p, v, q: grid_validation_nll(p, v, q, val_negatives),
        console,
        f"grid baseline (N_train={config.n_train})",
    )


class GridDistribution:
    """グリッド基準モデルを評価インターフェースに合わせるラッパー。"""

    kind = "grid"

    def __init__(self, params: GridParameters, grid: RotationGrid, threads: Optional[int] = None):
        self.params = params
        self.grid = grid
        self.threads = threads

    @property
    def max_ll(self) -> float:
        return theoretical_max_ll(self.grid.size + 1)

    def log_density(self, viewpoint: int, q) -> float:
        return grid_log_density(self.params, viewpoint, q, self.grid, self.threads)

    def log_densities(self, viewpoints, qs) -> np.ndarray:
        return grid_log_densities(self.params, viewpoints, qs, self.grid, self.threads)

    def sample_many(self, viewpoints, rng: np.random.Generator) -> np.ndarray:
        viewpoints = np.asarray(viewpoints, dtype=np.int64)
        out = np.empty((len(viewpoints), 4))
        for v in np.unique(viewpoints):
            rows = np.flatnonzero(viewpoints == v)
            out[rows] = sample_from_grid(self.params, int(v), self.grid, rng, size=len(rows), threads=self.threads)
        return out

    def predict_many(self, viewpoints) -> np.ndarray:
        viewpoints = np.asarray(viewpoints, dtype=np.int64)
        best = {int(v): self.grid.quats[int(np.argmax(grid_scores(self.params, int(v), self.grid, self.threads)))]
                for v in np.unique(viewpoints)}
        return np.stack([best[int(v)] for v in viewpoints])
