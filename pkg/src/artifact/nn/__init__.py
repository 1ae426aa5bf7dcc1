"""Deterministic float64 dense-network engine with reverse-mode autodiff."""
from .checkpoint import Checkpoint, CheckpointError
from .gradcheck import grad_check
from .model import (
    LayerParams,
    ModelParams,
    extract,
    forward,
    head_logits,
    init_model,
    masked_norm,
    softmax_np,
)
from .optim import SGD, sgd_step
from .tensor import GradientTape, NonFiniteError, TapeConsumedError, Tensor, backward

__all__ = [
    "Checkpoint", "CheckpointError", "GradientTape", "LayerParams", "ModelParams", "NonFiniteError",
    "SGD", "TapeConsumedError", "Tensor", "backward", "extract", "forward", "grad_check", "head_logits",
    "init_model", "masked_norm", "sgd_step", "softmax_np",
]
