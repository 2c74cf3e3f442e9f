from . import ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import SGD
from .tensor import Node, Tape, Tensor, active_tape, backward

__all__ = [
    "ops", "Tensor", "Tape", "Node", "backward", "active_tape", "SGD",
    "check_gradients", "numerical_grad", "relative_error",
]
