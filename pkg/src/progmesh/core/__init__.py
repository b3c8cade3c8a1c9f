from .autodiff import Node, backward, const, param, zero_grad
from .optim import AdamState, adam_step
from . import ops

__all__ = ["Node", "backward", "const", "param", "zero_grad", "AdamState", "adam_step", "ops"]
