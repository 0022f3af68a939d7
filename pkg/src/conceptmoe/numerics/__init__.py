"""Float64 tensor arithmetic, reverse-mode differentiation and SGD."""

from conceptmoe.numerics.gradcheck import check_gradients, numeric_grad, relative_error
from conceptmoe.numerics.kernels import gaussian_kernel2d
from conceptmoe.numerics.optim import OptimizerConfig, Parameter, sgd_step
from conceptmoe.numerics.tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    clamp_min,
    backward,
    conv2d,
    cross_entropy,
    div,
    exp,
    global_max,
    grad_enabled,
    l2_norm,
    linear,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    nll,
    no_grad,
    normalize,
    pick,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    sum_,
    take,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
