from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .ops import (bce_loss, conv2d, layer_norm, linear, log_softmax, maxpool2d,
                  multihead_attention, relu, sigmoid, softmax)
from .optim import SgdConfig, sgd_step

__all__ = [
    "GradCheckReport", "SgdConfig", "bce_loss", "conv2d", "grad_check", "layer_norm",
    "linear", "load_checkpoint", "log_softmax", "maxpool2d", "multihead_attention", "relu",
    "save_checkpoint", "sgd_step", "sigmoid", "softmax",
]
