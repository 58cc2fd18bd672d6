"""Differentiable core: primitives, precise RoI pooling, parameters, Adam, gradient checking.

Tensors and the reverse-mode graph are torch's; this package adds the pieces
the tracker needs on top (closed-form PrRoI backward, the checkpoint format,
an explicit Adam with coupled weight decay, a finite-difference oracle).
"""

from comet.diffcore.gradcheck import backward, numeric_grad, piecewise_numeric_grad, rel_error
from comet.diffcore.optim import AdamState, adam_step, step_lr
from comet.diffcore.params import CheckpointError, ParamStore, load_checkpoint, save_checkpoint
from comet.diffcore.primitives import ShapeError
from comet.diffcore.prroi import bilinear_sample, prroi_pool, prroi_pool_single

__all__ = [
    "AdamState", "CheckpointError", "ParamStore", "ShapeError", "adam_step", "backward",
    "bilinear_sample", "load_checkpoint", "numeric_grad", "piecewise_numeric_grad", "prroi_pool", "prroi_pool_single",
    "rel_error", "save_checkpoint", "step_lr",
]
