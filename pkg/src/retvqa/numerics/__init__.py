from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numeric_grad, relative_error
from .losses import bce, cross_entropy_logits
from .optim import Adam, AdamState, adam_step, warmup_linear_lr
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    elementwise,
    embedding,
    gelu,
    get_default_dtype,
    getitem,
    grad_enabled,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scaled_dot_attention,
    set_default_dtype,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
)
