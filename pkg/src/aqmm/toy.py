"""
階層的なトイデータ: 視点 i (0..5) ごとに 2^i 個の一様ランダムな回転モード。

学習分布と評価分布は同一なので過学習は起こり得ません。評価集合は各 (i, モード) を
2^{5-i} 回複製したもので、その平均は無限サンプル極限の期待値と一致します。
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .binning import BinPartition, sentence_of
from .density import dilution_log_factor
from .errors import InvalidInputError, ModeSetError
from .so3 import canonicalize, geodesic_distance, sample_uniform_rotation

N_VIEWPOINTS = 6
MIN_MODE_SEPARATION_DEG = 1.0
MAX_GENERATION_RETRIES = 100

_HEADER_TYPE = "aqmm-modes"


@dataclass(frozen=True, eq=False)
class ToyModeSet:
    seed: int
    modes: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i, m in enumerate(self.modes):
            if m.shape != (2**i, 4):
                raise InvalidInputError(f"Viewpoint {i} must hold {2**i} modes, got shape {m.shape}.")

    @property
    def n_viewpoints(self) -> int:
        return len(self.modes)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.modes], dtype=np.int64)

    @property
    def total_modes(self) -> int:
        return int(self.counts.sum())

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.modes, axis=0)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    def sentences(self, partition: BinPartition) -> list[np.ndarray]:
        return [sentence_of(m, partition) for m in self.modes]


@dataclass(frozen=True)
class ToySample:
    viewpoint: int
    q: np.ndarray


def _min_pairwise_deg(modes: np.ndarray) -> float:
    if len(modes) < 2:
        return np.inf
    dist = geodesic_distance(modes[:, None, :], modes[None, :, :])
    dist[np.diag_indices(len(modes))] = np.inf
    return float(np.degrees(dist.min()))


def generate_mode_set(seed: int, n_viewpoints: int = N_VIEWPOINTS) -> ToyModeSet:
    """シードから決定的にモード集合を生成します。視点内のモードは互いに 1° より離れます。"""
    rng = np.random.default_rng(seed)
    modes = []
    for i in range(n_viewpoints):
        for _ in range(MAX_GENERATION_RETRIES):
            candidate = sample_uniform_rotation(rng, 2**i)
            if _min_pairwise_deg(candidate) > MIN_MODE_SEPARATION_DEG:
                modes.append(candidate)
                break
        else:
            raise ModeSetError(
                f"Could not draw {2**i} modes separated by more than {MIN_MODE_SEPARATION_DEG} deg "
                f"for viewpoint {i} after {MAX_GENERATION_RETRIES} attempts."
            )
    return ToyModeSet(seed=seed, modes=tuple(modes))


def draw_samples(mode_set: ToyModeSet, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """視点を一様に選び、その視点のモードを一様に選びます。戻り値は (viewpoints, qs)。"""
    viewpoints = rng.integers(0, mode_set.n_viewpoints, size=n)
    picks = np.floor(rng.random(n) * mode_set.counts[viewpoints]).astype(np.int64)
    return viewpoints, mode_set.flat[mode_set.offsets[viewpoints] + picks]


def sample_stream(mode_set: ToyModeSet, rng: np.random.Generator, chunk: int = 1024) -> Iterator[ToySample]:
    while True:
        viewpoints, qs = draw_samples(mode_set, rng, chunk)
        for v, q in zip(viewpoints, qs):
            yield ToySample(int(v), q)


def validation_samples(mode_set: ToyModeSet, seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """学習と評価で共有する固定の検証サンプル。"""
    return draw_samples(mode_set, np.random.default_rng([seed, 2]), size)


@dataclass(frozen=True)
class EvaluationSet:
    """重複を畳んだ評価集合。weights[j] が (viewpoints[j], qs[j]) の複製数 2^{V-1-i}。"""
    viewpoints: np.ndarray
    qs: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return int(self.weights.sum())

    def expanded(self) -> tuple[np.ndarray, np.ndarray]:
        return np.repeat(self.viewpoints, self.weights), np.repeat(self.qs, self.weights, axis=0)

    def weighted_mean(self, values) -> float:
        values = np.asarray(values, dtype=np.float64)
        return float(np.sum(self.weights * values) / np.sum(self.weights))


def evaluation_set(mode_set: ToyModeSet) -> EvaluationSet:
    top = mode_set.n_viewpoints - 1
    viewpoints = np.repeat(np.arange(mode_set.n_viewpoints), mode_set.counts)
    weights = 2 ** (top - viewpoints)
    return EvaluationSet(viewpoints=viewpoints, qs=mode_set.flat, weights=weights.astype(np.int64))


def _sentence_log_probs(mode_set: ToyModeSet, partition: BinPartition) -> np.ndarray:
    # 同じ文を共有するモード数 / 2^i
    out = []
    for sentences in mode_set.sentences(partition):
        same = np.all(sentences[:, None, :] == sentences[None, :, :], axis=-1).sum(axis=1)
        out.append(np.log(same / len(sentences)))
    return np.concatenate(out)


def theoretical_optimal_ll(mode_set: ToyModeSet, partition: BinPartition) -> float:
    """到達可能な最大の平均対数尤度 (評価集合で重み付け)。"""
    per_mode = _sentence_log_probs(mode_set, partition) + dilution_log_factor(mode_set.flat, partition)
    return evaluation_set(mode_set).weighted_mean(per_mode)


def optimal_classification_nll(mode_set: ToyModeSet, partition: BinPartition) -> float:
    """言語モデル損失の下限。文の衝突がなければ (1/6) Σ i ln 2。"""
    return -evaluation_set(mode_set).weighted_mean(_sentence_log_probs(mode_set, partition))


# --- JSON lines ---

def _format_quat(q) -> str:
    return "[" + ", ".join(f"{float(x):.17g}" for x in q) + "]"


def _header_line(mode_set: ToyModeSet) -> str:
    modes = ", ".join("[" + ", ".join(_format_quat(q) for q in m) + "]" for m in mode_set.modes)
    return f'{{"type": "{_HEADER_TYPE}", "seed": {mode_set.seed}, "modes": [{modes}]}}\n'


def _parse_header(line: str, path: Path) -> ToyModeSet:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path}: header is not valid JSON ({e}).") from e
    if not isinstance(record, dict) or record.get("type") != _HEADER_TYPE:
        raise InvalidInputError(f"{path}: missing mode-set header record.")
    try:
        modes = tuple(np.asarray(m, dtype=np.float64).reshape(-1, 4) for m in record["modes"])
        seed = int(record["seed"])
    except KeyError as e:
        raise InvalidInputError(f"{path}: mode-set header lacks {e}.") from e
    except (TypeError, ValueError) as e:
        raise InvalidInputError(f"{path}: malformed mode-set header ({e}).") from e
    for i, m in enumerate(modes):
        if not np.allclose(np.linalg.norm(m, axis=-1), 1.0, atol=1e-9) or np.any(canonicalize(m) != m):
            raise InvalidInputError(f"{path}: viewpoint {i} holds non-canonical quaternions.")
    return ToyModeSet(seed=seed, modes=modes)


def save_mode_set(mode_set: ToyModeSet, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_header_line(mode_set), encoding="utf-8")


def load_mode_set(path: Path) -> ToyModeSet:
    with path.open(encoding="utf-8") as f:
        return _parse_header(f.readline(), path)


def write_samples(path: Path, mode_set: ToyModeSet, viewpoints, qs):
    """ヘッダ (モード集合) の後に 1 行 1 サンプルを書きます。各成分は有効数字 17 桁。"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(_header_line(mode_set))
        for v, q in zip(viewpoints, qs):
            f.write(f'{{"viewpoint": {int(v)}, "q": {_format_quat(q)}}}\n')


def read_samples(path: Path) -> tuple[ToyModeSet, np.ndarray, np.ndarray]:
    with path.open(encoding="utf-8") as f:
        mode_set = _parse_header(f.readline(), path)
        try:
            records = [json.loads(line) for line in f if line.strip()]
            viewpoints = np.array([r["viewpoint"] for r in records], dtype=np.int64)
            qs = np.array([r["q"] for r in records], dtype=np.float64).reshape(-1, 4)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInputError(f"{path}: malformed sample record ({e!r}).") from e
    return mode_set, viewpoints, qs
