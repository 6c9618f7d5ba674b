"""Minimal reverse-mode differentiation for the NTS networks."""

from . import ops
from .checkpoint import CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, NumericalError, grad_check
from .optim import OptimState, sgd_momentum_step
from .params import OWNERS, ParamSet, owner_of
from .tensor import GraphError, ShapeError, Tensor, no_grad, note_branch, record_branches

__all__ = [
    "CheckpointError",
    "GradCheckReport",
    "GraphError",
    "NumericalError",
    "OWNERS",
    "OptimState",
    "ParamSet",
    "ShapeError",
    "Tensor",
    "grad_check",
    "check_compatible",
    "load_checkpoint",
    "no_grad",
    "note_branch",
    "ops",
    "owner_of",
    "record_branches",
    "save_checkpoint",
    "sgd_momentum_step",
]
