from .autodiff import (
    NumericalError,
    ShapeMismatch,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    dropout,
    linear,
    lstm_step,
    matmul,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    set_check_finite,
    sigmoid,
    slice_cols,
    softmax_entropy,
    softmax_np,
    softmax_xent,
    sub,
    tanh,
    tsum,
)
from .checkpoint import CheckpointError, load_params, read_meta, save_params
from .gradcheck import grad_check
from .optim import MisalignedGradients, clip_grads, global_grad_norm, rmsprop_update
from .params import (
    DuplicateParam,
    ParamSet,
    UnknownParam,
    fanin_uniform,
    lstm_bias,
    lstm_recurrent,
    orthogonal,
)

__all__ = [
    "Tensor",
    "ParamSet",
    "no_grad",
    "grad_check",
    "rmsprop_update",
    "save_params",
    "read_meta",
    "load_params",
]
