"""SO(3) 上の厳密な回転密度 (四元数成分の自己回帰的な一様分布の混合)。"""
__version__ = "1.0.0"

from .binning import BinPartition
from .errors import AqmmError
from .main import cli
from .sampler import MogQuaternionModel, QuaternionModel
from .scorer import ScorerConfig, ScorerParameters, TrainingConfig, train
from .toy import generate_mode_set

__all__ = [
    "AqmmError",
    "BinPartition",
    "MogQuaternionModel",
    "QuaternionModel",
    "ScorerConfig",
    "ScorerParameters",
    "TrainingConfig",
    "generate_mode_set",
    "main",
    "train",
]


def main():
    cli()
