"""
学習可能な条件付きスコアラー。

視点ごとの文脈埋め込みと、位置エンコードされた前の成分を 2 層の GELU ネットワークに通し、
N 個のビンのロジット (binned ヘッド) または MoG パラメータ (mog ヘッド) を出力します。
3 ステップで隠れ層を共有し、ステップ番号は one-hot の入力射影 (w_step) で区別します。

逆伝播は手書きで、Adam とプラトー半減スケジュール付きの学習ループを含みます。
"""
import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from rich.console import Console
from scipy.special import logsumexp, ndtr

from .binning import BinPartition, illegal_masks, sentence_of
from .density import mog_bounds, mog_s_of_q
from .errors import InvalidInputError, StaleCacheError, TrainingDivergedError
from .toy import ToyModeSet, draw_samples, validation_samples

HEAD_KINDS = ("binned", "mog")
N_STEPS = 3

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ScorerConfig:
    n_bins: int = 4096
    n_freqs: int = 6
    d_ctx: int = 64
    hidden: tuple[int, int] = (128, 128)
    head: str = "binned"
    n_components: int = 512
    n_viewpoints: int = 6

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.head not in HEAD_KINDS:
            raise InvalidInputError(f"Unknown head kind {self.head!r}; expected one of {HEAD_KINDS}.")
        if len(self.hidden) != 2:
            raise InvalidInputError("The scorer has exactly two hidden layers.")
        dims = [self.n_bins, self.n_freqs, self.d_ctx, *self.hidden, self.n_components, self.n_viewpoints]
        if any(int(d) <= 0 for d in dims):
            raise InvalidInputError("All scorer dimensions must be positive.")

    @cached_property
    def partition(self) -> BinPartition:
        return BinPartition(self.n_bins)

    @property
    def encoding_width(self) -> int:
        return 1 + 2 * self.n_freqs

    @property
    def input_width(self) -> int:
        return self.d_ctx + 2 * self.encoding_width + N_STEPS

    @property
    def output_width(self) -> int:
        return self.n_bins if self.head == "binned" else 3 * self.n_components

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ScorerConfig":
        return cls(**data)


# --- Parameters ---

class ParameterSet:
    """名前付きパラメータ配列と版カウンタ。更新のたびに version が増えます。"""

    ORDER: tuple[str, ...] = ()

    def __init__(self, config, arrays: dict[str, np.ndarray], version: int = 0):
        missing = [name for name in self.ORDER if name not in arrays]
        if missing:
            raise InvalidInputError(f"Missing parameter arrays: {missing}")
        self.config = config
        self.arrays = {name: arrays[name] for name in self.ORDER}
        self.version = version

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self) -> np.dtype:
        return self.arrays[self.ORDER[0]].dtype

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return type(self)(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def astype(self, dtype):
        return type(self)(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.version)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def bump(self):
        self.version += 1


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ScorerParameters(ParameterSet):
    # チェックポイントに書き出す順序
    ORDER = ("embed", "w_ctx", "b_ctx", "w_qx", "w_qy", "w_step", "w_hidden", "b_hidden", "w_out", "b_out")

    @staticmethod
    def shapes(config: ScorerConfig) -> dict[str, tuple[int, ...]]:
        h1, h2 = config.hidden
        p = config.encoding_width
        return {
            "embed": (config.n_viewpoints, config.d_ctx),
            "w_ctx": (config.d_ctx, h1),
            "b_ctx": (h1,),
            "w_qx": (p, h1),
            "w_qy": (p, h1),
            "w_step": (N_STEPS, h1),
            "w_hidden": (h1, h2),
            "b_hidden": (h2,),
            "w_out": (h2, config.output_width),
            "b_out": (config.output_width,),
        }

    @classmethod
    def initialize(cls, config: ScorerConfig, rng: np.random.Generator, dtype=np.float32) -> "ScorerParameters":
        """一様分布 U(-1/√fan_in, 1/√fan_in) で初期化します。埋め込み表は fan_in = 1。"""
        h1, h2 = config.hidden
        fan_in = {
            "embed": 1,
            "w_ctx": config.input_width,
            "b_ctx": config.input_width,
            "w_qx": config.input_width,
            "w_qy": config.input_width,
            "w_step": config.input_width,
            "w_hidden": h1,
            "b_hidden": h1,
            "w_out": h2,
            "b_out": h2,
        }
        arrays = {name: uniform_init(rng, shape, fan_in[name], dtype) for name, shape in cls.shapes(config).items()}
        return cls(config, arrays)


# --- Building blocks ---

def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return (ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI).astype(x.dtype, copy=False)


def positional_encode(x, n_freqs: int) -> np.ndarray:
    """[x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^{L-1} πx), cos(2^{L-1} πx)]"""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise InvalidInputError("Positional encoding expects values in [-1, 1].")
    angles = x[..., None] * (np.pi * 2.0 ** np.arange(n_freqs))
    enc = np.empty(x.shape + (1 + 2 * n_freqs,))
    enc[..., 0] = x
    enc[..., 1::2] = np.sin(angles)
    enc[..., 2::2] = np.cos(angles)
    return enc


def masked_log_softmax(logits, mask) -> np.ndarray:
    """不正ビンを -inf にした log-softmax (最大値を引いて安定化)。"""
    z = np.where(mask, -np.inf, np.asarray(logits, dtype=np.float64))
    if np.any(np.all(mask, axis=-1)):
        raise InvalidInputError("Every bin is masked; at least one legal bin is required.")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


masked_log_probs = masked_log_softmax


@dataclass(frozen=True)
class ConditioningCache:
    """視点の文脈射影 embed[v] @ w_ctx + b_ctx。3 ステップのデコードで再利用します。"""
    viewpoint: int
    version: int
    context: np.ndarray


def context_projection(params: ScorerParameters, viewpoints) -> np.ndarray:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    return params["embed"][viewpoints] @ params["w_ctx"] + params["b_ctx"]


@dataclass
class _Tape:
    viewpoints: np.ndarray
    steps: np.ndarray
    ctx_in: np.ndarray
    enc_x: np.ndarray
    enc_y: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray


def _check_viewpoints(params: ScorerParameters, viewpoints: np.ndarray):
    if np.any(viewpoints < 0) or np.any(viewpoints >= params.config.n_viewpoints):
        raise InvalidInputError(f"Unknown viewpoint id; expected 0..{params.config.n_viewpoints - 1}.")


def _forward(params: ScorerParameters, viewpoints, steps, prev, context=None) -> tuple[np.ndarray, _Tape]:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    steps = np.asarray(steps, dtype=np.int64)
    prev = np.asarray(prev, dtype=np.float64)
    _check_viewpoints(params, viewpoints)
    dtype = params.dtype
    n_freqs = params.config.n_freqs

    enc_x = positional_encode(prev[:, 0], n_freqs).astype(dtype) * (steps >= 1)[:, None]
    enc_y = positional_encode(prev[:, 1], n_freqs).astype(dtype) * (steps >= 2)[:, None]
    if context is None:
        context = context_projection(params, viewpoints)
    pre1 = context + enc_x @ params["w_qx"] + enc_y @ params["w_qy"] + params["w_step"][steps]
    h1 = gelu(pre1)
    pre2 = h1 @ params["w_hidden"] + params["b_hidden"]
    h2 = gelu(pre2)
    out = h2 @ params["w_out"] + params["b_out"]
    tape = _Tape(viewpoints, steps, params["embed"][viewpoints], enc_x, enc_y, pre1, h1, pre2, h2)
    return out, tape


def _backward(params: ScorerParameters, tape: _Tape, g_out: np.ndarray) -> dict[str, np.ndarray]:
    grads = {
        "w_out": tape.h2.T @ g_out,
        "b_out": g_out.sum(axis=0),
    }
    g_pre2 = (g_out @ params["w_out"].T) * gelu_grad(tape.pre2)
    grads["w_hidden"] = tape.h1.T @ g_pre2
    grads["b_hidden"] = g_pre2.sum(axis=0)
    g_pre1 = (g_pre2 @ params["w_hidden"].T) * gelu_grad(tape.pre1)
    grads["w_qx"] = tape.enc_x.T @ g_pre1
    grads["w_qy"] = tape.enc_y.T @ g_pre1
    grads["b_ctx"] = g_pre1.sum(axis=0)
    grads["w_ctx"] = tape.ctx_in.T @ g_pre1

    g_step = np.zeros_like(params["w_step"])
    np.add.at(g_step, tape.steps, g_pre1)
    grads["w_step"] = g_step
    g_embed = np.zeros_like(params["embed"])
    np.add.at(g_embed, tape.viewpoints, g_pre1 @ params["w_ctx"].T)
    grads["embed"] = g_embed
    return grads


def forward_logits(params: ScorerParameters, viewpoints, steps, prev, context=None) -> np.ndarray:
    """行ごとの生出力。prev は形状 (R, 2) で、未使用の成分は無視されます。"""
    out, _ = _forward(params, viewpoints, steps, prev, context)
    return out


def _single_row(params: ScorerParameters, viewpoint: int, step: int, prev, cache: Optional[ConditioningCache]):
    if not isinstance(viewpoint, (int, np.integer)) or not 0 <= viewpoint < params.config.n_viewpoints:
        raise InvalidInputError(f"Unknown viewpoint id {viewpoint!r}.")
    prev = [float(p) for p in prev]
    if step not in (0, 1, 2) or len(prev) != step:
        raise InvalidInputError(f"Step {step} needs exactly {step} previous components, got {len(prev)}.")
    context = None
    if cache is not None:
        if cache.version != params.version or cache.viewpoint != viewpoint:
            raise StaleCacheError(
                f"Cache for viewpoint {cache.viewpoint} (v{cache.version}) does not match "
                f"viewpoint {viewpoint} (v{params.version})."
            )
        context = cache.context
    padded = np.zeros((1, 2))
    padded[0, : len(prev)] = prev
    return forward_logits(params, np.array([viewpoint]), np.array([step]), padded, context)[0]


def score_step(
    params: ScorerParameters, viewpoint: int, step: int, prev, cache: Optional[ConditioningCache] = None
) -> np.ndarray:
    """binned ヘッドの N 個の生ロジット。マスクは呼び出し側で前のビンから作ります。"""
    if params.config.head != "binned":
        raise InvalidInputError("score_step requires a binned head; use score_step_mog.")
    return _single_row(params, viewpoint, step, prev, cache)


def score_step_mog(params: ScorerParameters, viewpoint: int, step: int, prev, cache: Optional[ConditioningCache] = None):
    from .density import MoGHeadOutput

    if params.config.head != "mog":
        raise InvalidInputError("score_step_mog requires a mog head.")
    return MoGHeadOutput.from_raw(_single_row(params, viewpoint, step, prev, cache))


# --- Losses ---

def step_inputs(viewpoints: np.ndarray, qs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """B サンプルを 3B 行に展開します (行 b*3 + t がサンプル b のステップ t)。"""
    n = len(viewpoints)
    prev = np.zeros((n, N_STEPS, 2))
    prev[:, 1, 0] = qs[:, 0]
    prev[:, 2, 0] = qs[:, 0]
    prev[:, 2, 1] = qs[:, 1]
    return np.repeat(viewpoints, N_STEPS), np.tile(np.arange(N_STEPS), n), prev.reshape(-1, 2)


def step_masks(sentences: np.ndarray, partition: BinPartition) -> np.ndarray:
    """正解文の各接頭辞に対する不正ビンマスク。形状 (3B, N)。"""
    mm_sq = partition.min_magnitudes_sq[sentences]
    prefix = np.stack([np.zeros(len(sentences)), mm_sq[:, 0], mm_sq[:, 0] + mm_sq[:, 1]], axis=-1)
    return illegal_masks(prefix.reshape(-1), partition)


def _binned_loss(params: ScorerParameters, viewpoints, qs, with_grad: bool):
    config = params.config
    n = len(viewpoints)
    rows_v, steps, prev = step_inputs(viewpoints, qs)
    out, tape = _forward(params, rows_v, steps, prev)
    sentences = sentence_of(qs, config.partition)
    logp = masked_log_softmax(out, step_masks(sentences, config.partition))
    rows = np.arange(len(rows_v))
    labels = sentences.reshape(-1)
    loss = float(-np.sum(logp[rows, labels]) / n)
    if not with_grad:
        return loss, None
    g_out = np.exp(logp)
    g_out[rows, labels] -= 1.0
    return loss, _backward(params, tape, (g_out / n).astype(params.dtype))


def mog_targets(qs: np.ndarray) -> np.ndarray:
    """各成分のスコア変数 s(q_c)。形状 (B, 3)。"""
    return mog_s_of_q(qs[:, :3], mog_bounds(qs))


def _mog_loss(params: ScorerParameters, viewpoints, qs, with_grad: bool):
    k = params.config.n_components
    n = len(viewpoints)
    rows_v, steps, prev = step_inputs(viewpoints, qs)
    out, tape = _forward(params, rows_v, steps, prev)
    raw = out.astype(np.float64)
    alpha, mu, log_sigma = raw[:, :k], raw[:, k : 2 * k], raw[:, 2 * k :]
    s = mog_targets(qs).reshape(-1, 1)

    log_w = alpha - logsumexp(alpha, axis=-1, keepdims=True)
    inv_sigma = np.exp(-log_sigma)
    z = (s - mu) * inv_sigma
    joint = log_w - 0.5 * z * z - log_sigma - _LOG_SQRT_2PI
    lse = logsumexp(joint, axis=-1, keepdims=True)
    loss = float(-np.sum(lse) / n)
    if not with_grad:
        return loss, None
    resp = np.exp(joint - lse)
    g_out = np.concatenate([np.exp(log_w) - resp, -resp * z * inv_sigma, -resp * (z * z - 1.0)], axis=-1)
    return loss, _backward(params, tape, (g_out / n).astype(params.dtype))


def loss_and_grad(params: ScorerParameters, viewpoints, qs) -> tuple[float, dict[str, np.ndarray]]:
    """ミニバッチの損失 (サンプルあたり 3 ステップの和の平均) とその勾配。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = np.asarray(qs, dtype=np.float64)
    fn = _binned_loss if params.config.head == "binned" else _mog_loss
    return fn(params, viewpoints, qs, with_grad=True)


def batch_loss(params: ScorerParameters, viewpoints, qs) -> float:
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = np.asarray(qs, dtype=np.float64)
    fn = _binned_loss if params.config.head == "binned" else _mog_loss
    return fn(params, viewpoints, qs, with_grad=False)[0]


def evaluate_nll(params: ScorerParameters, viewpoints, qs, batch_size: int = 1024) -> float:
    """固定のバッチ分割で平均損失を計算します (同じ入力なら常に同じビット列)。"""
    viewpoints = np.asarray(viewpoints, dtype=np.int64)
    qs = np.asarray(qs, dtype=np.float64)
    total = 0.0
    for start in range(0, len(viewpoints), batch_size):
        chunk = slice(start, start + batch_size)
        total += batch_loss(params, viewpoints[chunk], qs[chunk]) * len(viewpoints[chunk])
    return total / len(viewpoints)


# --- Optimization ---

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        state.v = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return state


def adam_update(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState):
    state.step += 1
    t = state.step
    for name, value in params.arrays.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype, copy=False)
    params.bump()


def check_finite(loss: float, grads: dict[str, np.ndarray], where: str):
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"Non-finite loss ({loss}) at {where}.")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDivergedError(f"Non-finite gradients for {bad} at {where}.")


def training_step(params: ScorerParameters, state: AdamState, viewpoints, qs) -> float:
    """1 回の Adam 更新をその場で適用し、更新前の損失を返します。"""
    if len(viewpoints) == 0:
        raise InvalidInputError("Minibatch must not be empty.")
    loss, grads = loss_and_grad(params, viewpoints, qs)
    check_finite(loss, grads, f"optimizer step {state.step + 1}")
    adam_update(params, grads, state)
    return loss


# --- Training loop ---

@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    batch_size: int = 128
    samples_per_epoch: int = 40_000
    max_epochs: int = 200
    patience: int = 5
    max_halvings: int = 8
    val_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.samples_per_epoch <= 0:
            raise InvalidInputError("Learning rate, batch size and epoch size must be positive.")
        if self.max_epochs <= 0 or self.patience <= 0 or self.max_halvings <= 0 or self.val_size <= 0:
            raise InvalidInputError("Epoch cap, patience, halving cap and validation size must be positive.")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.samples_per_epoch / self.batch_size)

    def adam(self, params: ParameterSet) -> AdamState:
        return AdamState.for_params(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    lr: float
    seconds: float


@dataclass
class TrainingResult:
    params: ParameterSet
    log: list[EpochRecord]
    best_val_nll: float
    best_epoch: int
    stop_reason: str

    def log_dict(self) -> dict:
        return {
            "best_val_nll": self.best_val_nll,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "epochs": [asdict(r) for r in self.log],
        }


class PlateauSchedule:
    """
    検証損失が patience エポック改善しないたびに学習率を半分にします。
    改善すると半減の連続回数はリセットされます。
    """

    def __init__(self, state: AdamState, patience: int, max_halvings: int):
        self.state = state
        self.patience = patience
        self.max_halvings = max_halvings
        self.best = math.inf
        self.stale = 0
        self.halvings = 0

    def observe(self, val: float) -> bool:
        """改善したら True。"""
        if val < self.best:
            self.best = val
            self.stale = 0
            self.halvings = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.state.lr /= 2.0
            self.halvings += 1
            self.stale = 0
        return False

    @property
    def exhausted(self) -> bool:
        return self.halvings >= self.max_halvings


def run_training(
    params: ParameterSet,
    mode_set: ToyModeSet,
    training: TrainingConfig,
    step_fn,
    val_fn,
    console: Console,
    label: str,
) -> TrainingResult:
    """スコアラーとグリッド基準モデルで共有するエポックループ。最良の検証パラメータを返します。"""
    state = training.adam(params)
    schedule = PlateauSchedule(state, training.patience, training.max_halvings)
    data_rng = np.random.default_rng([training.seed, 1])
    val_v, val_q = validation_samples(mode_set, training.seed, training.val_size)

    console.print(
        f"[cyan]Training {label}[/cyan] ({params.num_parameters:,} parameters, "
        f"{training.steps_per_epoch} steps/epoch, batch {training.batch_size})"
    )
    best_params = params.copy()
    best_epoch = 0
    log: list[EpochRecord] = []
    stop_reason = "epoch cap"
    for epoch in range(1, training.max_epochs + 1):
        started = time.perf_counter()
        losses = []
        for _ in range(training.steps_per_epoch):
            viewpoints, qs = draw_samples(mode_set, data_rng, training.batch_size)
            losses.append(step_fn(params, state, viewpoints, qs))
        val = val_fn(params, val_v, val_q)
        lr_used = state.lr
        if schedule.observe(val):
            best_params = params.copy()
            best_epoch = epoch
        record = EpochRecord(epoch, float(np.mean(losses)), val, lr_used, time.perf_counter() - started)
        log.append(record)
        marker = "[green]*[/green]" if best_epoch == epoch else " "
        console.print(
            f"  epoch {epoch:4d} {marker} train {record.train_nll:9.4f}  val {val:9.4f}  "
            f"lr {lr_used:.2e}  [dim]{record.seconds:.1f}s[/dim]"
        )
        if state.lr != lr_used:
            console.print(f"  [yellow]No improvement for {training.patience} epochs; lr -> {state.lr:.2e}[/yellow]")
        if schedule.exhausted:
            stop_reason = f"{training.max_halvings} learning-rate halvings"
            break

    console.print(f"[green]Best validation NLL {schedule.best:.4f} at epoch {best_epoch}[/green] ({stop_reason})")
    return TrainingResult(best_params, log, schedule.best, best_epoch, stop_reason)


def train(mode_set: ToyModeSet, config: ScorerConfig, training: TrainingConfig, console: Console) -> TrainingResult:
    """トイデータの無限ストリームでスコアラーを学習します。シードが同じなら結果はビット単位で一致します。"""
    if config.n_viewpoints != mode_set.n_viewpoints:
        raise InvalidInputError(
            f"Scorer has {config.n_viewpoints} viewpoints but the mode set has {mode_set.n_viewpoints}."
        )
    params = ScorerParameters.initialize(config, np.random.default_rng([training.seed, 0]))
    label = f"{config.head} scorer (N={config.n_bins})"
    return run_training(params, mode_set, training, training_step, evaluate_nll, console, label)
