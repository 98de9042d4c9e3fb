from . import autodiff
from .autodiff import Tensor, no_grad
from .layers import (
    AdamW,
    Conv,
    CrossAttention,
    GroupNorm,
    Linear,
    Module,
    SelfAttention,
    timestep_embedding,
)

__all__ = [
    "autodiff",
    "Tensor",
    "no_grad",
    "AdamW",
    "Conv",
    "CrossAttention",
    "GroupNorm",
    "Linear",
    "Module",
    "SelfAttention",
    "timestep_embedding",
]
