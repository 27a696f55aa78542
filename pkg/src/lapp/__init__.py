"""Preference-guided locomotion training with a learned reward predictor."""

from .config import RunConfig, load_config
from .loop import LappRun, LoopConfig, LoopSettings

__all__ = ["LappRun", "LoopConfig", "LoopSettings", "RunConfig", "load_config"]
__version__ = "0.1.0"
