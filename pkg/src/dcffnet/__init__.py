"""Siamese tracker with staged depthwise correlation-fusion, built on numpy."""
from .config import Config, ModelConfig, TrackerConfig, TrainConfig, REFERENCE, TOY, load_config, parse_config
from .heads import BBox

__version__ = "0.1.0"

__all__ = ["BBox", "Config", "ModelConfig", "TrackerConfig", "TrainConfig", "REFERENCE", "TOY",
           "load_config", "parse_config", "__version__"]
