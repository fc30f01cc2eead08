"""
単位四元数と回転行列の幾何。

四元数は常に (q_x, q_y, q_z, q_w) の順で、先頭軸についてベクトル化されています。
正準代表は q_w >= 0 の半球上に取ります (q と -q は同じ回転)。
"""
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

# SO(3) の全体積 (q_w >= 0 の半球 S^3 の体積)
SO3_VOLUME = np.pi**2

# 正規直交性の許容誤差
ORTHONORMAL_TOL = 1e-6

_NORM_EPS = 1e-15

Size = Optional[Union[int, Tuple[int, ...]]]


def canonicalize(raw) -> np.ndarray:
    """
    任意の非ゼロ 4 ベクトルを正準単位四元数に変換します。
    q_w < 0 なら符号を反転し、q_w = 0 なら (q_x, q_y, q_z) の最初の非ゼロ成分が正になるよう反転します。
    """
    q = np.asarray(raw, dtype=np.float64)
    if q.shape[-1:] != (4,):
        raise InvalidInputError(f"Expected quaternions with a trailing axis of 4, got shape {q.shape}.")

    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)) or np.any(norm == 0.0):
        raise InvalidInputError("Cannot canonicalize a zero-norm or non-finite quaternion.")
    # 既に単位長のものは割らない (冪等性)
    norm = np.where(np.abs(norm - 1.0) <= _NORM_EPS, 1.0, norm)
    q = q / norm

    xyz = q[..., :3]
    first_nonzero = np.argmax(xyz != 0.0, axis=-1)[..., None]
    lead = np.take_along_axis(xyz, first_nonzero, axis=-1)[..., 0]
    w = q[..., 3]
    flip = (w < 0.0) | ((w == 0.0) & (lead < 0.0))
    return np.where(flip[..., None], -q, q)


def _rowwise(fn, x: np.ndarray, tail: int) -> np.ndarray:
    """先頭軸を平らにして Rotation (1 次元か 2 次元の入力のみ) に渡します。"""
    lead = x.shape[: x.ndim - tail]
    out = fn(x.reshape(-1, *x.shape[x.ndim - tail :]))
    return out.reshape(*lead, *out.shape[1:])


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return _rowwise(lambda rows: Rotation.from_quat(rows).as_matrix(), q, 1)


def matrix_to_quat(R) -> np.ndarray:
    """
    回転行列を正準単位四元数に変換します。
    Rotation.from_matrix は入力を黙って直交化するため、先に R^T R = I と det R = 1 を検査します。
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise InvalidInputError(f"Expected rotation matrices with trailing shape (3, 3), got {R.shape}.")

    gram = np.swapaxes(R, -1, -2) @ R
    ortho_err = np.max(np.abs(gram - np.eye(3)), axis=(-2, -1))
    det_err = np.abs(np.linalg.det(R) - 1.0)
    if np.any(ortho_err > ORTHONORMAL_TOL) or np.any(det_err > ORTHONORMAL_TOL):
        raise InvalidInputError("Matrix is not a proper rotation (R^T R != I or det R != 1).")

    return canonicalize(_rowwise(lambda rows: Rotation.from_matrix(rows).as_quat(), R, 2))


def geodesic_distance(q1, q2) -> np.ndarray:
    """2 つの回転の間の角度 (rad)。2·arccos(min(1, |q1·q2|)) ∈ [0, π]。"""
    dot = np.abs(np.sum(np.asarray(q1, dtype=np.float64) * np.asarray(q2, dtype=np.float64), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def quat_to_rotation_vector(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return _rowwise(lambda rows: Rotation.from_quat(rows).as_rotvec(), q, 1)


def rotation_vector_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return canonicalize(_rowwise(lambda rows: Rotation.from_rotvec(rows).as_quat(), v, 1))


def sample_uniform_rotation(rng: np.random.Generator, size: Size = None) -> np.ndarray:
    """
    Haar 一様な回転を生成します。
    4 次元標準正規乱数を正規化して正準化するため、size=None なら形状 (4,) を返します。
    """
    shape = (4,) if size is None else (*np.atleast_1d(size).tolist(), 4)
    return canonicalize(rng.standard_normal(shape))
