from .tensor import (
    Tensor,
    add,
    backward,
    channel_affine,
    clamp,
    conv2d,
    dense,
    get_default_dtype,
    global_avg_pool,
    log,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu6,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax_cross_entropy,
)
from .params import ParameterSet, kaiming_normal
from .optim import Adam, OptimizerError, SGDMomentum, cosine_annealing_lr
from .checkpoint import CheckpointError, load_arrays, save_arrays

__all__ = [
    "Adam",
    "CheckpointError",
    "OptimizerError",
    "ParameterSet",
    "SGDMomentum",
    "Tensor",
    "add",
    "backward",
    "channel_affine",
    "clamp",
    "conv2d",
    "cosine_annealing_lr",
    "dense",
    "get_default_dtype",
    "global_avg_pool",
    "kaiming_normal",
    "load_arrays",
    "log",
    "mul",
    "no_grad",
    "reduce_mean",
    "reduce_sum",
    "relu6",
    "reshape",
    "save_arrays",
    "set_default_dtype",
    "sigmoid",
    "softmax_cross_entropy",
]
