"""Selective per-token latent iteration for small causal transformers."""
from .backbone import TaHModel, sample, static_gate
from .config import ModelConfig, RunConfig, TaskConfig, TrainConfig
from .decider import IterationDecider
from .errors import TahError

__all__ = ["TaHModel", "sample", "static_gate", "ModelConfig", "RunConfig", "TaskConfig", "TrainConfig",
           "IterationDecider", "TahError"]
__version__ = "0.1.0"
