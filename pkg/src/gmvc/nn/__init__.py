from gmvc.nn.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from gmvc.nn.gradcheck import gradcheck, max_relative_error
from gmvc.nn.layers import (
    BLSTM,
    BatchNorm,
    Conv1d,
    INFER_CTX,
    LayerCtx,
    LayerSpec,
    Linear,
    forward_backward,
)
from gmvc.nn.optim import Adam, adam_step
from gmvc.nn.params import ParamStore, xavier_init
from gmvc.nn.tensor import Tensor, backward, no_grad

__all__ = [
    "Adam",
    "BLSTM",
    "BatchNorm",
    "Conv1d",
    "INFER_CTX",
    "LayerCtx",
    "LayerSpec",
    "Linear",
    "ParamStore",
    "Tensor",
    "adam_step",
    "backward",
    "forward_backward",
    "gradcheck",
    "load_checkpoint",
    "max_relative_error",
    "no_grad",
    "read_checkpoint",
    "save_checkpoint",
    "xavier_init",
]
