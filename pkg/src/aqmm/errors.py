"""aqmm の例外階層。CLI はこれらを JSON エラーオブジェクトに変換します。"""


class AqmmError(Exception):
    """aqmm が送出する全ての例外の基底クラス。"""


class InvalidInputError(AqmmError, ValueError):
    """入力が演算の事前条件を満たしていない。"""


class ConfigError(InvalidInputError):
    """設定ファイルまたは環境変数の上書きが不正。"""


class StaleCacheError(InvalidInputError):
    """条件付けキャッシュが古いパラメータ版に対して作られている。"""


class CheckpointError(AqmmError):
    """チェックポイントのマジック・版・種別・長さが不正。"""


class TrainingDivergedError(AqmmError, FloatingPointError):
    """損失が有限でなくなった。"""


class SamplingError(AqmmError, RuntimeError):
    """棄却サンプリングが上限回数に達した。"""


class ModeSetError(AqmmError):
    """モード集合の相異条件を満たせなかった。"""
