"""Minimal reverse-mode tensor engine."""
from . import kernels, ops
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .ops import (add, batch_norm2d, bce, concat, conv2d, elementwise_mul, getitem,
                  global_avg_pool, linear, log, matmul, max_pool2d, mean, mul, relu, reshape,
                  sigmoid, softmax, stack, sub, tanh, transpose)
from .ops import sum  # noqa: A004
from .optim import AdamState, ParamStore, adam_step
from .tensor import (CHECK, STANDARD, NonFiniteError, ShapeError, Tape, TapeError, Tensor,
                     make_result)


def backward(tape: Tape, loss: Tensor, wrt=None):
    return tape.backward(loss, wrt=wrt)


__all__ = [
    "AdamState", "CHECK", "CheckpointError", "NonFiniteError", "ParamStore", "STANDARD",
    "ShapeError", "Tape", "TapeError", "Tensor", "adam_step", "add", "backward",
    "batch_norm2d", "bce", "concat", "conv2d", "elementwise_mul", "getitem",
    "global_avg_pool", "kernels", "linear", "log", "load_checkpoint", "make_result", "matmul",
    "max_pool2d", "mean", "mul", "ops", "read_checkpoint", "relu", "reshape",
    "save_checkpoint", "sigmoid", "softmax", "stack", "sub", "sum", "tanh", "transpose",
]
