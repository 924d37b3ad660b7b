"""Minimal differentiable layers, losses and optimiser used by both stages."""

from .gradcheck import check_module, gradient_check, numeric_gradient, relative_error
from .layers import (
    Conv1d,
    Dense,
    FeedForward,
    GlobalAvgPool1d,
    LayerNorm,
    MaskedMeanPool,
    Module,
    MultiHeadSelfAttention,
    ReLU,
    TransformerBlock,
    conv1d_forward,
    positional_encoding,
    softmax,
)
from .losses import (
    ArcFaceParams,
    arcface_loss,
    arcface_probabilities,
    binary_cross_entropy_with_logits,
    cosine_logits,
    softmax_cross_entropy,
)
from .optim import AdamState, adam_step
from .train import TrainConfig, train_loop

__all__ = [
    "AdamState", "ArcFaceParams", "Conv1d", "Dense", "FeedForward", "GlobalAvgPool1d",
    "LayerNorm", "MaskedMeanPool", "Module", "MultiHeadSelfAttention", "ReLU", "TrainConfig",
    "TransformerBlock", "adam_step", "arcface_loss", "arcface_probabilities",
    "binary_cross_entropy_with_logits", "check_module", "conv1d_forward", "cosine_logits",
    "gradient_check", "numeric_gradient", "positional_encoding", "relative_error", "softmax",
    "softmax_cross_entropy", "train_loop",
]
