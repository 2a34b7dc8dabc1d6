from .functional import LN_EPS, avg_pool_1d, gelu, layer_norm, max_pool_1d, softmax_masked
from .gradcheck import GradcheckReport, finite_diff_gradcheck
from .optim import OptimConfig, adamw_step, clip_global_norm, global_grad_norm, zero_grad
from .tensor import (
    trace_branches,
    Parameter,
    Tensor,
    as_tensor,
    backward,
    broadcast_to,
    check_finite,
    concat,
    matmul,
    no_grad,
    roll,
    set_check_finite,
)

__all__ = [
    "LN_EPS",
    "GradcheckReport",
    "OptimConfig",
    "Parameter",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "avg_pool_1d",
    "backward",
    "broadcast_to",
    "check_finite",
    "clip_global_norm",
    "concat",
    "finite_diff_gradcheck",
    "gelu",
    "global_grad_norm",
    "layer_norm",
    "matmul",
    "max_pool_1d",
    "no_grad",
    "roll",
    "set_check_finite",
    "softmax_masked",
    "trace_branches",
    "zero_grad",
]
