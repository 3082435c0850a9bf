from . import ops
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .tensor import Parameter, ShapeError, Tape, Tensor, UsageError, as_tensor

__all__ = [
    "Adam", "AdamState", "NonFiniteGradient", "Parameter", "ShapeError",
    "Tape", "Tensor", "UsageError", "adam_step", "as_tensor", "ops",
]
