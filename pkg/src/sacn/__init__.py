"""Self-attention capsule networks on a small numpy autodiff core."""
from .config import ConfigError, RunConfig, load_config, override, preset
from .data import DataError, Dataset
from .estimator import SACNClassifier
from .model import SacnModel
from .train import NumericalError, ablate, evaluate, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Dataset", "NumericalError", "RunConfig", "SACNClassifier",
    "SacnModel", "ablate", "evaluate", "gradcheck", "load_config", "override", "preset", "train",
]
