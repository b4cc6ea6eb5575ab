"""Efficient depth completion: two-branch prediction, relative fusion and funnel spatial propagation."""

from .config import ExperimentConfig, load_config
from .model import EMDC

__all__ = ["EMDC", "ExperimentConfig", "load_config"]
__version__ = "0.1.0"
