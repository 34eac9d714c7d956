"""Minimal differentiable-computation substrate."""

from .autodiff import (  # noqa: F401
    ShapeMismatch,
    Tape,
    TapeConsumed,
    Var,
    abs_,
    add,
    add_const,
    attn_aggregate,
    avgpool_hw,
    beta_kl_loss,
    col,
    concat_last,
    const,
    conv2d,
    div,
    gru_cell,
    linear,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    slice_cols,
    softmax_last,
    softplus,
    square,
    stack_cols,
    sub,
    sum_all,
    sum_axis_last,
    tanh,
)
from .gradcheck import GradCheckReport, grad_check  # noqa: F401
from .params import (  # noqa: F401
    CheckpointError,
    ParamStore,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    save_checkpoint,
)
from .special import (  # noqa: F401
    DomainError,
    beta_kl,
    beta_kl_grad,
    digamma,
    log_beta,
    log_gamma,
    trigamma,
)
