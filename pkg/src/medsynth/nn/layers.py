"""Network building blocks on top of the autodiff engine.

All layers use channels-last layout and take an explicit numpy Generator at
construction time, so parameter initialisation is a pure function of
(architecture, seed).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ValidationError
from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: parameters are Tensor attributes, discovered by walking."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}"))
        return out

    def param_count(self) -> int:
        return sum(int(p.data.size) for p in self.named_parameters().values())

    def export_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_parameters(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValidationError(
                f"parameter name mismatch (missing={sorted(missing)[:4]}, extra={sorted(extra)[:4]})"
            )
        for k, p in params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.data.shape:
                raise ValidationError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def cast(self, dtype):
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None


def _param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, zero_init=False, bias=True):
        std = 0.0 if zero_init else math.sqrt(1.0 / d_in)
        self.w = _param(rng, (d_in, d_out), std, dtype)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        return out + self.b if self.b is not None else out


class Conv(Module):
    """k^d convolution in channels-last layout; d is 2 or 3."""

    def __init__(self, rng, spatial_dims: int, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, dtype=np.float32, zero_init=False):
        if spatial_dims not in (2, 3):
            raise ValidationError(f"spatial_dims must be 2 or 3, got {spatial_dims}")
        self.spatial_dims = spatial_dims
        self.stride = stride
        self.padding = k // 2
        fan_in = c_in * k**spatial_dims
        std = 0.0 if zero_init else math.sqrt(2.0 / fan_in)
        shape = (k,) * spatial_dims + (c_in, c_out)
        self.w = _param(rng, shape, std, dtype)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        op = ad.conv2d if self.spatial_dims == 2 else ad.conv3d
        return op(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    """Normalise over spatial positions and channel groups.

    Group count is min(8, channels); channels must divide evenly.
    """

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.groups = min(8, channels)
        if channels % self.groups != 0:
            raise ValidationError(f"channels {channels} not divisible by {self.groups} groups")
        self.eps = eps
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        n, c = shape[0], shape[-1]
        if c != self.channels:
            raise ValidationError(f"GroupNorm built for {self.channels} channels, got {c}")
        spatial = int(np.prod(shape[1:-1])) if len(shape) > 2 else 1
        g = self.groups
        xg = ad.reshape(x, (n, spatial, g, c // g))
        mu = xg.mean(axis=(1, 3), keepdims=True)
        centred = xg - mu
        var = ad.square(centred).mean(axis=(1, 3), keepdims=True)
        xhat = centred / ad.tsqrt(var + self.eps)
        xhat = ad.reshape(xhat, shape)
        return xhat * self.gamma + self.beta


class SelfAttention(Module):
    """Single-head dot-product attention over flattened spatial positions."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.norm = GroupNorm(channels, dtype=dtype)
        self.wq = Linear(rng, channels, channels, dtype=dtype, bias=False)
        self.wk = Linear(rng, channels, channels, dtype=dtype, bias=False)
        self.wv = Linear(rng, channels, channels, dtype=dtype, bias=False)
        self.wo = Linear(rng, channels, channels, dtype=dtype, zero_init=True)
        self.scale = 1.0 / math.sqrt(channels)

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        n, c = shape[0], shape[-1]
        h = ad.reshape(self.norm(x), (n, -1, c))
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        attn = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        out = self.wo(ad.matmul(attn, v))
        return x + ad.reshape(out, shape)


class CrossAttention(Module):
    """Queries from spatial positions, keys/values from condition tokens."""

    def __init__(self, rng, channels: int, token_dim: int, dtype=np.float32):
        self.norm = GroupNorm(channels, dtype=dtype)
        self.wq = Linear(rng, channels, channels, dtype=dtype, bias=False)
        self.wk = Linear(rng, token_dim, channels, dtype=dtype, bias=False)
        self.wv = Linear(rng, token_dim, channels, dtype=dtype, bias=False)
        self.wo = Linear(rng, channels, channels, dtype=dtype, zero_init=True)
        self.scale = 1.0 / math.sqrt(channels)

    def __call__(self, x: Tensor, tokens: Tensor, token_mask: np.ndarray | None = None) -> Tensor:
        """token_mask: (n, n_tokens) with 1 for real tokens, 0 for padding."""
        shape = x.shape
        n, c = shape[0], shape[-1]
        h = ad.reshape(self.norm(x), (n, -1, c))
        q = self.wq(h)
        k, v = self.wk(tokens), self.wv(tokens)
        logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * self.scale
        if token_mask is not None:
            bias = np.where(token_mask[:, None, :] > 0, 0.0, -1e4).astype(logits.dtype)
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        out = self.wo(ad.matmul(attn, v))
        return x + ad.reshape(out, shape)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer step indices; sin half then cos half.

    Values lie in [-1, 1]; at t = 0 the sin half is 0 and the cos half is 1.
    """
    if dim % 2 != 0:
        raise ValidationError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
