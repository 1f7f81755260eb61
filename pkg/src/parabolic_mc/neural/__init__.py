from . import autodiff
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (LayerSpec, Network, NetworkSpec, act, backward, conv, conv_stack, dense,
                     forward, gradcheck, mlp, relative_error)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "autodiff", "Tensor", "no_grad", "load_checkpoint", "save_checkpoint", "LayerSpec",
    "Network", "NetworkSpec", "act", "backward", "conv", "conv_stack", "dense", "forward",
    "gradcheck", "mlp", "relative_error", "Adam", "AdamState", "adam_step",
]
