"""Minimal float64 tensor library with tape-based reverse-mode gradients."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numerical_grad, relative_error
from .nn import Conv2d, Linear, Module, glorot_uniform
from .ops import (
    abs, add, concat, conv2d, cross_entropy, div, elementwise, exp, getitem,
    l1_distance, linear_axis, log, matmul, maximum, mean, minimum, mul, neg,
    leaky_relu, pad2d, reduce, relu, reshape, resize_nearest, scale, sigmoid,
    softmax_lastdim, square, sub, sum, transpose,
)
from .optim import SGD, sgd_step
from .tensor import (
    DimensionError, Node, NonFiniteError, StateError, Tape, Tensor, grad_enabled,
    no_grad, ones, tensor, zeros,
)
