"""Differentiable float64 tensor core: autodiff, primitives, normed layers, gradcheck."""
from . import kernels, ops
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check
from .nn import Conv2d, Conv2DN, Dense, DenseN, GroupNorm, Module, conv2d_norm, norm_groups
from .tensor import DTYPE, Parameter, Tensor, is_grad_enabled, no_grad, tensor

__all__ = [
    "DTYPE",
    "Conv2d",
    "Conv2DN",
    "Dense",
    "DenseN",
    "GradCheckReport",
    "GroupNorm",
    "Module",
    "Parameter",
    "Tensor",
    "conv2d_norm",
    "finite_diff_check",
    "is_grad_enabled",
    "kernels",
    "load_checkpoint",
    "no_grad",
    "norm_groups",
    "ops",
    "read_manifest",
    "save_checkpoint",
    "tensor",
]
