from .gradcheck import GradCheckReport, grad_check
from .optim import OptimState, adamw_step, clip_grad_norm, onecycle_lr, peak_step
from .random import beta_sample, derangement, make_rng
from .stats import ConstantInputError, pearson, rowwise_pearson
from .tape import Tape, Tensor, as_tensor

__all__ = [
    "ConstantInputError",
    "GradCheckReport",
    "OptimState",
    "Tape",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "beta_sample",
    "clip_grad_norm",
    "derangement",
    "grad_check",
    "make_rng",
    "onecycle_lr",
    "peak_step",
    "pearson",
    "rowwise_pearson",
]
