import dataclasses
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import typer

from .errors import ConfigError, InvalidInputError
from .grid import GridConfig
from .scorer import ScorerConfig, TrainingConfig
from .toy import N_VIEWPOINTS

# アプリケーション定数
APP_NAME = "aqmm"
CONFIG_FILENAME = "config.toml"
ENV_PREFIX = "AQMM_"
MODEL_KINDS = ("aquamam", "aquamam-mog", "grid")


def get_global_config_dir() -> Path:
    """
    OS標準のユーザー設定ディレクトリを取得します。
    (例: ~/.config/aqmm on Linux, AppData/Local/aqmm on Windows)
    """
    path = Path(typer.get_app_dir(APP_NAME))
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_default_config_path() -> Path:
    return get_global_config_dir() / CONFIG_FILENAME


# --- Sections ---

@dataclass(frozen=True)
class DatasetSection:
    seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    kind: str = "aquamam"
    n_bins: int = 4096
    n_freqs: int = 6
    d_ctx: int = 64
    hidden: tuple[int, int] = (128, 128)
    n_components: int = 512
    grid_size: int = 65536
    n_train: int = 4096
    grid_seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}.")
        if self.n_bins % 2 == 1:
            warnings.warn(f"model.n_bins = {self.n_bins} is odd; 0 falls inside a bin.", UserWarning, stacklevel=2)

    def scorer_config(self) -> ScorerConfig:
        return ScorerConfig(
            n_bins=self.n_bins,
            n_freqs=self.n_freqs,
            d_ctx=self.d_ctx,
            hidden=self.hidden,
            head="mog" if self.kind == "aquamam-mog" else "binned",
            n_components=self.n_components,
            n_viewpoints=N_VIEWPOINTS,
        )

    def grid_config(self) -> GridConfig:
        return GridConfig(
            grid_size=self.grid_size,
            n_train=self.n_train,
            grid_seed=self.grid_seed,
            n_freqs=self.n_freqs,
            d_ctx=self.d_ctx,
            hidden=self.hidden,
            n_viewpoints=N_VIEWPOINTS,
        )


@dataclass(frozen=True)
class EvalSection:
    n_samples: int = 40_000
    seed: int = 0


@dataclass(frozen=True)
class PathsSection:
    modes: str = "modes.jsonl"
    out: str = "model.aqmm"


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["model"]["hidden"] = list(self.model.hidden)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        """未知のセクション・キーは ConfigError。値は各フィールドの型で検証します。"""
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"Unknown config section(s): {sorted(unknown)}")
        hints = typing.get_type_hints(cls)
        built = {}
        for name in sections:
            raw = data.get(name, {})
            if not isinstance(raw, Mapping):
                raise ConfigError(f"[{name}] must be a table.")
            built[name] = _build_section(name, hints[name], raw)
        return cls(**built)


def _coerce(section: str, key: str, kind, value):
    where = f"{section}.{key}"
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}.")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}.")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}.")
        return value
    # tuple[int, int]
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{where} must be a list of integers, got {value!r}.")
    return tuple(value)


def _build_section(name: str, cls, raw: Mapping):
    hints = typing.get_type_hints(cls)
    unknown = set(raw) - set(hints)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {sorted(unknown)}")
    values = {key: _coerce(name, key, _base_type(hints[key]), value) for key, value in raw.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except InvalidInputError as e:
        raise ConfigError(f"[{name}] {e}") from e


def _base_type(hint):
    return typing.get_origin(hint) or hint


def _parse_env_value(raw: str, kind):
    if kind is tuple:
        return [int(part) for part in raw.replace("[", "").replace("]", "").split(",") if part.strip()]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def apply_env_overrides(data: dict, environ: Mapping[str, str]) -> dict:
    """AQMM_<SECTION>__<KEY>=value を設定辞書に上書きします。"""
    hints = typing.get_type_hints(RunConfig)
    merged = {}
    for section, table in data.items():
        if not isinstance(table, Mapping):
            raise ConfigError(f"[{section}] must be a table.")
        merged[section] = dict(table)
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("__")
        if section not in hints:
            raise ConfigError(f"{name}: unknown section {section!r}.")
        fields = typing.get_type_hints(hints[section])
        if key not in fields:
            raise ConfigError(f"{name}: unknown key {key!r} in [{section}].")
        try:
            value = _parse_env_value(raw, _base_type(fields[key]))
        except ValueError as e:
            raise ConfigError(f"{name}: cannot parse {raw!r} ({e}).") from e
        merged.setdefault(section, {})[key] = value
    return merged


def load_run_config(path: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    TOML ファイルを読み込み、環境変数で上書きして RunConfig を作ります。
    path が None なら <app dir>/config.toml を (あれば) 使います。
    """
    environ = os.environ if environ is None else environ
    if path is None:
        default = get_default_config_path()
        path = default if default.exists() else None
    data: dict = {}
    if path is not None:
        try:
            with path.open("rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML ({e}).") from e
    return RunConfig.from_dict(apply_env_overrides(data, environ))
