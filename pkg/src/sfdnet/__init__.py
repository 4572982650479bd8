"""Selective feature discrimination and multi-feature-center classification
on a small self-contained reverse-mode numeric core."""

from .config import TrainConfig, effective_config, load_config, published_config
from .data import Dataset, SynthConfig, synth_generate
from .mfcc import CenterBank, init_centers
from .numcore import Tape, Tensor, backward, finite_diff_check
from .sfd import SfdConfig
from .trainer import Model, build_model, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "CenterBank",
    "Dataset",
    "Model",
    "SfdConfig",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "effective_config",
    "evaluate",
    "finite_diff_check",
    "fit",
    "init_centers",
    "load_config",
    "published_config",
    "synth_generate",
]
