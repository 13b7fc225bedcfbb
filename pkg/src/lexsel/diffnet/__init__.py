"""Minimal reverse-mode autodiff, MLPs, Adam and checkpoints."""

from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint,
                         split_prefixed)
from .network import MlpSpec, ParamStore, init_mlp, mlp_forward, mlp_logits
from .optim import MissingGradError, adam_step
from .tensor import (Tensor, add, as_tensor, backward, clip, concat_rows,
                     dense, div, exp, gather_cols, log, log_sigmoid,
                     log_softmax, logsumexp, matmul, mul, neg, no_grad, power,
                     relu, repeat_rows, reshape, sigmoid, softmax, stop_grad,
                     straight_through, sub, tmean, tsum)

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "matmul",
    "relu", "sigmoid", "log_sigmoid", "exp", "log", "clip",
    "tsum", "tmean", "reshape", "repeat_rows", "concat_rows", "gather_cols",
    "stop_grad", "straight_through", "softmax", "log_softmax", "logsumexp",
    "dense",
    "MlpSpec", "ParamStore", "init_mlp", "mlp_forward", "mlp_logits",
    "adam_step", "MissingGradError",
    "save_checkpoint", "load_checkpoint", "split_prefixed", "CheckpointError",
]
