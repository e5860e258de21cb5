from pointcaps.autodiff.gradcheck import GradcheckReport, gradcheck, numeric_grad, relative_error
from pointcaps.autodiff.serialize import tensor_from_bytes, tensor_to_bytes
from pointcaps.autodiff.tensor import (
    Function,
    Tensor,
    as_tensor,
    broadcast_shape,
    concat,
    default_dtype,
    div,
    einsum,
    elementwise,
    exp,
    gather_rows,
    l2_norm,
    log,
    log_softmax,
    matmul,
    min_,
    no_grad,
    precision,
    reduce,
    relu,
    set_default_dtype,
    sigmoid,
    softmax,
    sqrt,
    square,
)

__all__ = [
    "Function",
    "GradcheckReport",
    "Tensor",
    "as_tensor",
    "broadcast_shape",
    "concat",
    "default_dtype",
    "div",
    "einsum",
    "elementwise",
    "exp",
    "gather_rows",
    "gradcheck",
    "l2_norm",
    "log",
    "log_softmax",
    "matmul",
    "min_",
    "no_grad",
    "numeric_grad",
    "precision",
    "reduce",
    "relative_error",
    "relu",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "sqrt",
    "square",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
