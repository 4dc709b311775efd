from . import ops
from .autograd import NonFiniteError, Tape, Tensor, active_tape, as_tensor, parameter
from .optim import Adam, AdamState, linear_decay

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "linear_decay",
    "ops",
    "parameter",
]
