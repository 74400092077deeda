from . import functional, mdtn, nn
from .functional import conv2d, group_norm, layer_norm, scaled_dot_attention, softmax
from .optim import Adam, WeightAverage
from .tensor import ShapeError, Tensor, backward, no_grad

__all__ = [
    "Adam", "ShapeError", "Tensor", "backward", "conv2d", "functional", "group_norm",
    "layer_norm", "mdtn", "nn", "no_grad", "scaled_dot_attention", "softmax",
    "WeightAverage",
]
