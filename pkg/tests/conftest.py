import numpy as np
import pytest
from rich.console import Console
from typer.testing import CliRunner

from aqmm.scorer import ScorerConfig, ScorerParameters, TrainingConfig
from aqmm.toy import generate_mode_set

# 単体テスト用の小さなモデル
TINY_SCORER = dict(n_bins=64, n_freqs=2, d_ctx=8, hidden=(16, 16))
TINY_TRAINING = dict(batch_size=32, samples_per_epoch=128, max_epochs=3, val_size=64, seed=0)

TINY_TOML = """
[dataset]
seed = 0

[model]
kind = "aquamam"
n_bins = 64
n_freqs = 2
d_ctx = 8
hidden = [16, 16]
n_components = 8
grid_size = 256
n_train = 16

[training]
batch_size = 32
samples_per_epoch = 128
max_epochs = 2
val_size = 64
seed = 0

[paths]
modes = "modes.jsonl"
out = "model.aqmm"
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def temp_project(tmp_path, monkeypatch):
    """
    テスト用の一時作業ディレクトリを作成し、カレントディレクトリをそこに移動します。
    """
    project_dir = tmp_path / "run"
    project_dir.mkdir()
    monkeypatch.chdir(project_dir)
    return project_dir


@pytest.fixture
def mock_global_config(tmp_path, monkeypatch):
    """
    グローバル設定ディレクトリ (~/.config/aqmm 等) を一時ディレクトリに向けます。
    """
    fake_config_dir = tmp_path / "fake_config"
    fake_config_dir.mkdir()

    # aqmm.config モジュールの関数をモック
    def mock_get_dir():
        return fake_config_dir

    monkeypatch.setattr("aqmm.config.get_global_config_dir", mock_get_dir)
    return fake_config_dir


@pytest.fixture
def quiet_console():
    return Console(quiet=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mode_set():
    return generate_mode_set(0)


@pytest.fixture
def tiny_config():
    return ScorerConfig(**TINY_SCORER)


@pytest.fixture
def tiny_params(tiny_config):
    return ScorerParameters.initialize(tiny_config, np.random.default_rng(0))


@pytest.fixture
def tiny_training():
    return TrainingConfig(**TINY_TRAINING)


@pytest.fixture
def tiny_toml(temp_project):
    path = temp_project / "run.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path
