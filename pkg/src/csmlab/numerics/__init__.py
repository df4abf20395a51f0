from .autodiff import Tape, Tensor, backward
from .gradcheck import GradCheckReport, grad_check
from .layers import transformer_block
from .optim import AdamState, LrSchedule, adam_step, cosine_lr

__all__ = [
    "AdamState",
    "GradCheckReport",
    "LrSchedule",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "cosine_lr",
    "grad_check",
    "transformer_block",
]
