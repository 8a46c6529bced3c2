from .tensor import (
    GraphConsumedError,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    default_dtype,
    div,
    exp,
    gelu,
    getitem,
    grad_enabled,
    log,
    matmul,
    mul,
    no_grad,
    power,
    precision,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
)
from .functional import (
    avg_pool2d,
    conv2d,
    conv_transpose2d,
    group_norm,
    layer_norm,
    linear,
    max_pool2d,
    softmax,
    upsample_bilinear,
)
from .gradcheck import GradCheckReport, grad_check
from . import serialize
