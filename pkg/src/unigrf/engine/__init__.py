from unigrf.engine.tensor import (
    PRIMITIVES,
    Tensor,
    add,
    apply_primitive,
    backward,
    concat_rows,
    default_dtype,
    elementwise_mul,
    exp,
    gather_rows,
    get_default_dtype,
    grad_enabled,
    layer_norm,
    log,
    log_sum_exp_row,
    masked_fill,
    matmul,
    no_grad,
    row_sum,
    scale,
    scatter_add_rows,
    set_default_dtype,
    sigmoid,
    silu,
    softmax_row,
    transpose,
    zero_grads,
)
from unigrf.engine.optim import Adam, OptimizerState, adam_step
from unigrf.engine.gradcheck import finite_difference_check, relative_error
from unigrf.engine.checkpoint import load_tensors, save_tensors

__all__ = [name for name in dir() if not name.startswith("_")]
