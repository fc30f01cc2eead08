"""
"AQMM" チェックポイント形式。

    magic      4 バイト  b"AQMM"
    version    u32 (LE)  FORMAT_VERSION
    kind       u32 (LE)  0 = aquamam, 1 = aquamam-mog, 2 = grid
    length     u32 (LE)  続く JSON のバイト数
    config     UTF-8 JSON (RunConfig 全体)
    params     各パラメータ配列を '<f4' で ORDER の順に連結

読み込み時は末尾の余りや不足も CheckpointError になります。
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .config import MODEL_KINDS, RunConfig
from .errors import AqmmError, CheckpointError
from .grid import GridParameters
from .scorer import ScorerParameters

MAGIC = b"AQMM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class Checkpoint:
    kind: str
    config: RunConfig
    params: Union[ScorerParameters, GridParameters]


def _param_class(kind: str):
    return GridParameters if kind == "grid" else ScorerParameters


def _model_config(kind: str, config: RunConfig):
    return config.model.grid_config() if kind == "grid" else config.model.scorer_config()


def encode_checkpoint(kind: str, config: RunConfig, params) -> bytes:
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"Unknown model kind {kind!r}.")
    if config.model.kind != kind:
        raise CheckpointError(f"Config describes a {config.model.kind!r} model, not {kind!r}.")
    payload = config.to_json().encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, MODEL_KINDS.index(kind), len(payload)), payload]
    parts += [np.ascontiguousarray(params[name], dtype="<f4").tobytes() for name in params.ORDER]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("Checkpoint is truncated (header incomplete).")
    magic, version, kind_code, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"Bad magic {magic!r}; not an AQMM checkpoint.")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version} (expected {FORMAT_VERSION}).")
    if kind_code >= len(MODEL_KINDS):
        raise CheckpointError(f"Unknown model kind code {kind_code}.")
    kind = MODEL_KINDS[kind_code]

    offset = _HEADER.size
    if len(data) < offset + length:
        raise CheckpointError("Checkpoint is truncated (config incomplete).")
    try:
        config = RunConfig.from_dict(json.loads(data[offset : offset + length].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, AqmmError) as e:
        raise CheckpointError(f"Embedded config is unreadable: {e}") from e
    offset += length

    cls = _param_class(kind)
    model_config = _model_config(kind, config)
    arrays = {}
    for name, shape in cls.shapes(model_config).items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if len(data) < end:
            raise CheckpointError(f"Checkpoint is truncated (parameter {name!r} incomplete).")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"Checkpoint has {len(data) - offset} unexpected trailing bytes.")
    return Checkpoint(kind, config, cls(model_config, arrays))


def save_checkpoint(path: Path, kind: str, config: RunConfig, params):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(kind, config, params))


def load_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
