"""Dense tensor math, reverse-mode gradients, AdamW and learning-rate schedules."""
from pulse.core.autodiff import Tensor, grad, no_grad
from pulse.core.functional import argmax_first, cosine_similarity, cross_entropy, softmax
from pulse.core.optim import AdamW, AdamWState, LrSchedule, adamw_step, lr_at_step
from pulse.core.params import ParamStore

__all__ = [
    "AdamW", "AdamWState", "LrSchedule", "ParamStore", "Tensor", "adamw_step", "argmax_first",
    "cosine_similarity", "cross_entropy", "grad", "lr_at_step", "no_grad", "softmax",
]
