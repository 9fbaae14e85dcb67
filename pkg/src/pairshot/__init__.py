"""Paired few-shot cross-domain image generation."""

from .config import RunConfig
from .data import PairedDataset, load_dataset
from .nets import ModelBundle

__all__ = ["ModelBundle", "PairedDataset", "RunConfig", "load_dataset"]
__version__ = "0.1.0"
