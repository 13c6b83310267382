from .optim import Adam, AdamHyper, AdamState, adam_step
from .rng import STREAMS, Rng
from .tensor import (
    Gradients,
    Tape,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    elementwise,
    matmul,
    no_tape,
    reduce,
)

__all__ = [
    "Adam",
    "AdamHyper",
    "AdamState",
    "Gradients",
    "Rng",
    "STREAMS",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "elementwise",
    "matmul",
    "no_tape",
    "reduce",
]
