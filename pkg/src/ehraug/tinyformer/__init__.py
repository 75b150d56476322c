from .checkpoint import Checkpoint
from .model import (
    Batch,
    ModelConfig,
    NonFiniteLossError,
    Params,
    forward_encoder,
    init_params,
    loss_and_grads,
    mlm_loss,
    pool,
    pool_and_classify,
    predict_proba,
    reset_classifier,
)
from .optim import AdamHyper, AdamState, adam_step

__all__ = [
    "AdamHyper",
    "AdamState",
    "Batch",
    "Checkpoint",
    "ModelConfig",
    "NonFiniteLossError",
    "Params",
    "adam_step",
    "forward_encoder",
    "init_params",
    "loss_and_grads",
    "mlm_loss",
    "pool",
    "pool_and_classify",
    "predict_proba",
    "reset_classifier",
]
