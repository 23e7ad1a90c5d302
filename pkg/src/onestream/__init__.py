"""One-stream transformer tracking with early candidate elimination, in numpy."""

from .config import ModelConfig, TrainConfig, load_config
from .model import TrackerNet

__all__ = ["ModelConfig", "TrainConfig", "load_config", "TrackerNet"]
__version__ = "0.1.0"
