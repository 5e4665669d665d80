from duplex.tensor.array import (
    Array,
    DomainError,
    NonFiniteError,
    Parameter,
    ParameterError,
    ShapeError,
    Tape,
    add,
    as_array,
    attention,
    backward,
    concat,
    dropout,
    elementwise,
    exp,
    getitem,
    is_recording,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    logsumexp,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    record,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)
from duplex.tensor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, select_prefix
from duplex.tensor.module import Module
from duplex.tensor.optim import Adam, AdamState, adam_step
