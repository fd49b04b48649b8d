"""Uncertainty-aware attention from a pair of sparse variational GPs on the KSVD of the attention kernel."""
from .errors import KepSvgpError
from .model import Transformer, TransformerConfig, predict_mc
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["KepSvgpError", "Transformer", "TransformerConfig", "TrainConfig", "predict_mc", "train", "__version__"]
