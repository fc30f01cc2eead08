"""
[-1, 1] の N 分割、ビン割り当て、厳密に不正なビンのマスク、幾何的に制約されたビン幅。

マスクはビン番号のみから決まります (前のビンの最小絶対値を使う)。
一方、制約付き幅 ω は前の成分の連続値から計算します。
"""
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class BinPartition:
    n_bins: int

    def __post_init__(self):
        if not isinstance(self.n_bins, (int, np.integer)) or self.n_bins < 2:
            raise InvalidInputError(f"Bin count must be an integer >= 2, got {self.n_bins!r}.")
        if self.n_bins % 2 == 1:
            warnings.warn(
                f"Odd bin count {self.n_bins}: 0 lies inside a bin instead of on an edge.",
                UserWarning,
                stacklevel=3,
            )

    @cached_property
    def edges(self) -> np.ndarray:
        # a_i = -1 + 2i/N。edges[N] は正確に 1、N が偶数なら edges[N/2] は正確に 0
        return -1.0 + 2.0 * np.arange(self.n_bins + 1) / self.n_bins

    @property
    def lower(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def upper(self) -> np.ndarray:
        return self.edges[1:]

    @property
    def width(self) -> float:
        return 2.0 / self.n_bins

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @cached_property
    def min_magnitudes(self) -> np.ndarray:
        """各ビン [a_i, b_i) 上の |x| の下限。"""
        a, b = self.lower, self.upper
        return np.where((a <= 0.0) & (b > 0.0), 0.0, np.minimum(np.abs(a), np.abs(b)))

    @cached_property
    def min_magnitudes_sq(self) -> np.ndarray:
        return self.min_magnitudes**2


def bin_of(x, partition: BinPartition) -> np.ndarray:
    """floor(N(x+1)/2)。x = 1 は最後のビンに入ります。"""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < -1.0) or np.any(x > 1.0):
        raise InvalidInputError("Bin assignment requires values in [-1, 1].")
    n = partition.n_bins
    idx = np.clip(np.floor(n * (x + 1.0) / 2.0).astype(np.int64), 0, n - 1)
    # 丸め誤差で辺と食い違った場合は辺の配列に合わせる
    idx = np.where(x < partition.lower[idx], idx - 1, idx)
    idx = np.where((x >= partition.upper[idx]) & (idx < n - 1), idx + 1, idx)
    return idx


def min_magnitude(i, partition: BinPartition) -> np.ndarray:
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i >= partition.n_bins):
        raise InvalidInputError(f"Bin index out of range [0, {partition.n_bins}).")
    return partition.min_magnitudes[i]


def prefix_min_sq(prev_bins, partition: BinPartition) -> np.ndarray:
    """前のビン列の最小絶対値の二乗和。prev_bins の最終軸が接頭辞。"""
    prev_bins = np.asarray(prev_bins, dtype=np.int64)
    if prev_bins.shape[-1] == 0:
        return np.zeros(prev_bins.shape[:-1])
    return np.sum(min_magnitude(prev_bins, partition) ** 2, axis=-1)


def illegal_masks(prefix_sq, partition: BinPartition) -> np.ndarray:
    """接頭辞の二乗和 (形状 (R,)) から形状 (R, N) の不正ビンマスクを作ります。"""
    prefix_sq = np.asarray(prefix_sq, dtype=np.float64)
    return partition.min_magnitudes_sq + prefix_sq[..., None] > 1.0


def strictly_illegal_mask(prev_bins: Sequence[int], partition: BinPartition) -> np.ndarray:
    """
    True が厳密に不正なビン。
    min_magnitude(i)^2 + Σ min_magnitude(prev)^2 > 1 のときに限り不正です (等号は合法)。
    """
    prev_bins = np.asarray(prev_bins, dtype=np.int64).reshape(-1)
    if prev_bins.size > 2:
        raise InvalidInputError("A prefix holds at most two bins.")
    prefix = float(prefix_min_sq(prev_bins, partition))
    if prefix > 1.0:
        raise InvalidInputError(f"Prefix {prev_bins.tolist()} is itself illegal.")
    return illegal_masks(prefix, partition)


def constrained_width(i, remaining_sq, partition: BinPartition) -> np.ndarray:
    """[a_i, b_i) ∩ [-√r, √r] の長さ。r = 1 なら全幅 2/N。"""
    i = np.asarray(i, dtype=np.int64)
    radius = np.sqrt(np.clip(np.asarray(remaining_sq, dtype=np.float64), 0.0, 1.0))
    a, b = partition.lower[i], partition.upper[i]
    return np.maximum(0.0, np.minimum(b, radius) - np.maximum(a, -radius))


def sentence_of(q, partition: BinPartition) -> np.ndarray:
    """(q_x, q_y, q_z) それぞれのビン番号。形状 (..., 3)。"""
    q = np.asarray(q, dtype=np.float64)
    return bin_of(np.clip(q[..., :3], -1.0, 1.0), partition)
