"""
閉形式の密度。

- 成分ごとの一様分布の混合と制約付き幅
- 射影座標 (q_x, q_y, q_z) 上の結合密度と、q_w による希釈を含む半球上の密度
- 言語モデル損失と厳密な NLL
- 単位円板から半球への密度変換 (デモ付き)
- MoG ヘッドのロジスティック変数変換

ゼロ確率は例外ではなく対数空間の -inf で表します。
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .binning import BinPartition, bin_of, constrained_width, sentence_of
from .errors import InvalidInputError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


# --- Mixtures of uniform distributions ---

def component_density(q_c, pi, remaining_sq, partition: BinPartition) -> np.ndarray:
    """
    1 成分の密度 π_k / ω。k は q_c を含むビン、ω はその制約付き幅。
    ω = 0 のセルでは 0 を返します。
    """
    q_c = np.asarray(q_c, dtype=np.float64)
    remaining_sq = np.asarray(remaining_sq, dtype=np.float64)
    if np.any(np.abs(q_c) > np.sqrt(np.clip(remaining_sq, 0.0, None)) + 1e-12):
        raise InvalidInputError("Component value lies outside the remaining unit-norm budget.")
    k = bin_of(q_c, partition)
    omega = constrained_width(k, remaining_sq, partition)
    pi_k = np.take_along_axis(np.asarray(pi, dtype=np.float64), k[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(omega > 0.0, pi_k / np.where(omega > 0.0, omega, 1.0), 0.0)


def constrained_widths(q, partition: BinPartition) -> tuple[np.ndarray, np.ndarray]:
    """q_y, q_z のセルの制約付き幅 (ω_y, ω_z)。"""
    q = np.asarray(q, dtype=np.float64)
    x, y = q[..., 0], q[..., 1]
    sentence = sentence_of(q, partition)
    omega_y = constrained_width(sentence[..., 1], 1.0 - x * x, partition)
    omega_z = constrained_width(sentence[..., 2], 1.0 - x * x - y * y, partition)
    return omega_y, omega_z


def _cell_log_term(q, partition: BinPartition) -> np.ndarray:
    # ln(N / (2 ω_y ω_z))、ω がゼロなら -inf
    omega_y, omega_z = constrained_widths(q, partition)
    ok = (omega_y > 0.0) & (omega_z > 0.0)
    with np.errstate(divide="ignore"):
        value = (
            np.log(partition.n_bins)
            - np.log(2.0)
            - np.log(np.where(ok, omega_y, 1.0))
            - np.log(np.where(ok, omega_z, 1.0))
        )
    return np.where(ok, value, -np.inf)


def _log_qw(q) -> np.ndarray:
    w = np.asarray(q, dtype=np.float64)[..., 3]
    with np.errstate(divide="ignore"):
        return np.where(w > 0.0, np.log(np.where(w > 0.0, w, 1.0)), -np.inf)


def selected_log_probs(log_pis, sentence) -> np.ndarray:
    """各ステップで正解ビンに割り当てられた log π。形状 (..., 3)。"""
    return np.take_along_axis(np.asarray(log_pis), np.asarray(sentence)[..., None], axis=-1)[..., 0]


def projected_log_density(q, log_pis, partition: BinPartition) -> np.ndarray:
    """射影座標 (q_x, q_y, q_z) 上の対数密度 (希釈前)。log_pis は形状 (..., 3, N)。"""
    log_pi = selected_log_probs(log_pis, sentence_of(q, partition)).astype(np.float64)
    return np.sum(log_pi, axis=-1) + _cell_log_term(q, partition)


def dilution_log_factor(q, partition: BinPartition) -> np.ndarray:
    """ln(N q_w / (2 ω_y ω_z))。全対数密度と言語モデル対数確率の差です。"""
    return _cell_log_term(q, partition) + _log_qw(q)


def full_log_density(q, log_pis, partition: BinPartition) -> np.ndarray:
    """
    半球上の対数密度
    ln π_x[k_x] + ln π_y[k_y] + ln π_z[k_z] + ln(N q_w / (2 ω_y ω_z))。
    """
    return projected_log_density(q, log_pis, partition) + _log_qw(q)


def language_model_nll(log_pis, sentences) -> float:
    """3 トークンの言語モデル損失 (サンプルあたり nats)。"""
    log_pi = selected_log_probs(log_pis, sentences)
    return float(-np.mean(np.sum(log_pi, axis=-1)))


def dilution_correction(qs, partition: BinPartition) -> float:
    return float(np.mean(dilution_log_factor(qs, partition)))


def exact_nll(log_pis, qs, partition: BinPartition) -> float:
    """希釈項を含む厳密な NLL = 言語モデル損失 - 平均希釈補正。"""
    return language_model_nll(log_pis, sentence_of(qs, partition)) - dilution_correction(qs, partition)


def precision_lower_bound(n_bins, q_w) -> np.ndarray:
    """N q_w / (2 ω_y ω_z) >= N^3 q_w / 8。"""
    return np.asarray(n_bins, dtype=np.float64) ** 3 * np.asarray(q_w, dtype=np.float64) / 8.0


# --- Disk -> hemisphere ---

def disk_to_hemisphere_density(p_xy, x, y) -> np.ndarray:
    """単位円板上の密度を半球上の密度 p(x, y) z に変換します。"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r_sq = x * x + y * y
    if np.any(r_sq >= 1.0):
        raise InvalidInputError("Point lies on or outside the unit disk boundary.")
    return np.asarray(p_xy, dtype=np.float64) * np.sqrt(1.0 - r_sq)


def uniform_hemisphere(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2])
    return v


@dataclass(frozen=True)
class HemisphereDemo:
    points: np.ndarray
    densities: np.ndarray
    mean_density: float
    true_density: float = 1.0 / (2.0 * np.pi)


def hemisphere_demo(
    rng: np.random.Generator, n_points: int = 1000, n_fit: int = 100_000, grid: int = 50
) -> HemisphereDemo:
    """
    半球上の一様分布を、円板上の一様分布の混合 (grid x grid のヒストグラム) で近似します。
    n_fit 点で混合比を推定し、別の n_points 点の密度をヤコビアンで半球へ戻します。
    """
    fit = uniform_hemisphere(rng, n_fit)
    counts, _, _ = np.histogram2d(fit[:, 0], fit[:, 1], bins=grid, range=[[-1.0, 1.0], [-1.0, 1.0]])
    cell_area = (2.0 / grid) ** 2
    disk_density = counts / (n_fit * cell_area)

    points = uniform_hemisphere(rng, n_points)
    points = points[points[:, 2] > 0.0]
    ix = np.clip(np.floor((points[:, 0] + 1.0) / 2.0 * grid).astype(np.int64), 0, grid - 1)
    iy = np.clip(np.floor((points[:, 1] + 1.0) / 2.0 * grid).astype(np.int64), 0, grid - 1)
    densities = disk_to_hemisphere_density(disk_density[ix, iy], points[:, 0], points[:, 1])
    return HemisphereDemo(points=points, densities=densities, mean_density=float(np.mean(densities)))


# --- Mixture of Gaussians head ---

@dataclass(frozen=True)
class MoGHeadOutput:
    """
    制約なしスコア変数 s の MoG。各配列の最終軸が K 成分。
    生出力のレイアウトは [重みのロジット (K) | 平均 (K) | 対数スケール (K)]。
    """
    log_weights: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> "MoGHeadOutput":
        raw = np.asarray(raw, dtype=np.float64)
        k = raw.shape[-1] // 3
        logits = raw[..., :k]
        return cls(
            log_weights=logits - logsumexp(logits, axis=-1, keepdims=True),
            means=raw[..., k : 2 * k],
            log_scales=raw[..., 2 * k :],
        )

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)


def mog_s_of_q(q_c, u) -> np.ndarray:
    """s = ln(q_c + u) - ln(u - q_c)。"""
    q_c = np.asarray(q_c, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(np.abs(q_c) >= u):
        raise InvalidInputError("MoG transform requires -u < q_c < u.")
    return np.log(q_c + u) - np.log(u - q_c)


def mog_q_of_s(s, u) -> np.ndarray:
    """q_c = -u + 2u / (1 + e^{-s})。"""
    u = np.asarray(u, dtype=np.float64)
    return -u + 2.0 * u * expit(np.asarray(s, dtype=np.float64))


def mog_dsdq(q_c, u) -> np.ndarray:
    q_c = np.asarray(q_c, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(np.abs(q_c) >= u):
        raise InvalidInputError("MoG transform requires -u < q_c < u.")
    return 2.0 * u / (u * u - q_c * q_c)


def mog_log_prob(s, head: MoGHeadOutput) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)[..., None]
    z = (s - head.means) * np.exp(-head.log_scales)
    log_normal = -0.5 * z * z - head.log_scales - _LOG_SQRT_2PI
    return logsumexp(head.log_weights + log_normal, axis=-1)


def mog_bounds(q) -> np.ndarray:
    """各成分の上限 u = (1, √(1-q_x²), √(1-q_x²-q_y²))。"""
    q = np.asarray(q, dtype=np.float64)
    x, y = q[..., 0], q[..., 1]
    return np.stack(
        [np.ones_like(x), np.sqrt(np.clip(1.0 - x * x, 0.0, None)), np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))],
        axis=-1,
    )


def mog_full_log_density(q, heads: Sequence[MoGHeadOutput]) -> np.ndarray:
    """
    Π_c p_MoG(s(q_c)) |ds/dq|_c · q_w の対数。境界上 (|q_c| >= u_c または q_w = 0) は -inf。
    """
    q = np.asarray(q, dtype=np.float64)
    comps = q[..., :3]
    u = mog_bounds(q)
    interior = np.all(np.abs(comps) < u, axis=-1) & (q[..., 3] > 0.0)
    safe_q = np.where(interior[..., None], comps, 0.0)
    safe_u = np.where(interior[..., None], u, 1.0)

    s = mog_s_of_q(safe_q, safe_u)
    log_jacobian = np.log(2.0 * safe_u) - np.log(safe_u * safe_u - safe_q * safe_q)
    log_p = sum(mog_log_prob(s[..., c], heads[c]) for c in range(3))
    log_p = log_p + np.sum(log_jacobian, axis=-1) + np.log(np.where(interior, q[..., 3], 1.0))
    return np.where(interior, log_p, -np.inf)
