"""Multimodal transformer classifier with modality translation, built on a small numpy autodiff core."""

from marmot.model import ModelConfig, MultimodalExample, forward, init_params, predict
from marmot.training import TrainConfig, train

__all__ = ["ModelConfig", "MultimodalExample", "TrainConfig", "forward", "init_params", "predict", "train"]
__version__ = "0.1.0"
