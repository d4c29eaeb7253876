"""Hierarchical interaction graph-transformer for multi-resolution slide pyramids."""

__version__ = "0.1.0"

from .config import ModelConfig, SynthSpec
from .graph import HierarchicalGraph, build_hierarchical_graph, load, save, validate
from .model import HIGT, SlidePrediction, build_model, load_checkpoint, save_checkpoint
from .train import EvalReport, cross_validate, evaluate, kfold_split, train

__all__ = [
    "EvalReport", "HIGT", "HierarchicalGraph", "ModelConfig", "SlidePrediction", "SynthSpec",
    "build_hierarchical_graph", "build_model", "cross_validate", "evaluate", "kfold_split",
    "load", "load_checkpoint", "save", "save_checkpoint", "train", "validate",
]
