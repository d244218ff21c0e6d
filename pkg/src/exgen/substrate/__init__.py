"""Minimal differentiable-model layer used by the training loops."""

from . import tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import BACKEND
from .model import (
    AdamState,
    ArchError,
    ModelParams,
    ShapeMismatchError,
    apply,
    autoencoder_arch,
    build_model,
    discriminator_arch,
    forward,
    generator_arch,
    infer_shapes,
    param_tensors,
)
from .optim import KeyMismatchError, OptimConfig, adam_step
from .tensor import NonScalarLossError, Tensor, gradients

__all__ = [
    "BACKEND",
    "AdamState",
    "ArchError",
    "KeyMismatchError",
    "ModelParams",
    "NonScalarLossError",
    "OptimConfig",
    "ShapeMismatchError",
    "Tensor",
    "adam_step",
    "apply",
    "autoencoder_arch",
    "build_model",
    "discriminator_arch",
    "forward",
    "generator_arch",
    "gradients",
    "infer_shapes",
    "load_checkpoint",
    "param_tensors",
    "save_checkpoint",
    "tensor",
]
