"""Unsupervised point-cloud shape correspondence with orientation-aware self-ensembling."""

from .config import Config, desk_config, load_config
from .model import CorrespondenceNet

__all__ = ["Config", "CorrespondenceNet", "desk_config", "load_config"]
__version__ = "0.1.0"
