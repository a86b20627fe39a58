from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cosine_similarity,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    softmax,
    sub,
    sum_,
    swapaxes,
    topological_order,
    transpose,
    zero_grad,
)
