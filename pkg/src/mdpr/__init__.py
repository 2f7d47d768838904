"""Dual-branch person re-identification with mutual distillation."""

from .config import RunConfig, load_config
from .model import MDPR, FeatureBundle

__version__ = "0.1.0"

__all__ = ["MDPR", "FeatureBundle", "RunConfig", "load_config", "__version__"]
