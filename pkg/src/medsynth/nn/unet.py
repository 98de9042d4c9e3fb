"""Conditional U-Net noise predictor in 2D and 3D.

Channels-last layout.  Timestep embeddings enter every residual block as a
per-channel bias; a class embedding vector is added onto the timestep
embedding; text-token matrices modulate the network through cross-attention
at the configured resolution levels.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from . import autodiff as ad
from .autodiff import Tensor
from .autodiff import silu
from .layers import Conv, CrossAttention, GroupNorm, Linear, Module, SelfAttention, timestep_embedding


class ResBlock(Module):
    """Two convolutions with group norm, SiLU, and a timestep bias."""

    def __init__(self, rng, spatial_dims, c_in, c_out, temb_dim, dtype=np.float32):
        self.norm1 = GroupNorm(c_in, dtype=dtype)
        self.conv1 = Conv(rng, spatial_dims, c_in, c_out, dtype=dtype)
        self.temb_proj = Linear(rng, temb_dim, c_out, dtype=dtype)
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.conv2 = Conv(rng, spatial_dims, c_out, c_out, dtype=dtype, zero_init=True)
        self.skip = None if c_in == c_out else Conv(rng, spatial_dims, c_in, c_out, k=1, dtype=dtype)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        bias = self.temb_proj(silu(temb))
        # broadcast (N, C) over the spatial axes
        bshape = (bias.shape[0],) + (1,) * (h.ndim - 2) + (bias.shape[1],)
        h = h + ad.reshape(bias, bshape)
        h = self.conv2(silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class UNet(Module):
    """Noise-prediction backbone; output shape always equals input shape."""

    def __init__(self, rng, *, spatial_dims=2, in_channels=1, base_width=16, depth=3,
                 attention_levels=(2,), time_embed_dim=64, cond_embed_dim=0,
                 use_cross_attention=False, dtype=np.float32):
        if depth < 1:
            raise ValidationError(f"depth must be >= 1, got {depth}")
        bad_levels = set(attention_levels) - set(range(depth))
        if bad_levels:
            raise ValidationError(f"attention levels {sorted(bad_levels)} outside 0..{depth - 1}")
        self.spatial_dims = spatial_dims
        self.depth = depth
        self.in_channels = in_channels
        self.time_embed_dim = time_embed_dim
        self.cond_embed_dim = cond_embed_dim
        self.use_cross_attention = use_cross_attention
        self.attention_levels = sorted(set(attention_levels))

        widths = [base_width * min(2**i, 4) for i in range(depth)]
        self.widths = widths

        self.time_mlp1 = Linear(rng, time_embed_dim, time_embed_dim, dtype=dtype)
        self.time_mlp2 = Linear(rng, time_embed_dim, time_embed_dim, dtype=dtype)
        self.class_proj = Linear(rng, cond_embed_dim, time_embed_dim, dtype=dtype) if cond_embed_dim else None

        self.stem = Conv(rng, spatial_dims, in_channels, widths[0], dtype=dtype)

        self.down_blocks, self.down_attn, self.down_cross, self.downsamplers = [], [], [], []
        c_prev = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(rng, spatial_dims, c_prev, w, time_embed_dim, dtype=dtype))
            has_attn = i in self.attention_levels
            self.down_attn.append(SelfAttention(rng, w, dtype=dtype) if has_attn else None)
            self.down_cross.append(
                CrossAttention(rng, w, cond_embed_dim, dtype=dtype)
                if has_attn and use_cross_attention else None
            )
            self.downsamplers.append(
                Conv(rng, spatial_dims, w, w, stride=2, dtype=dtype) if i < depth - 1 else None
            )
            c_prev = w

        w_mid = widths[-1]
        self.mid_block1 = ResBlock(rng, spatial_dims, w_mid, w_mid, time_embed_dim, dtype=dtype)
        self.mid_attn = SelfAttention(rng, w_mid, dtype=dtype)
        self.mid_cross = CrossAttention(rng, w_mid, cond_embed_dim, dtype=dtype) if use_cross_attention else None
        self.mid_block2 = ResBlock(rng, spatial_dims, w_mid, w_mid, time_embed_dim, dtype=dtype)

        self.up_blocks, self.up_attn, self.up_cross, self.upsamplers = [], [], [], []
        for i in reversed(range(depth)):
            w = widths[i]
            self.up_blocks.append(ResBlock(rng, spatial_dims, 2 * w, w, time_embed_dim, dtype=dtype))
            has_attn = i in self.attention_levels
            self.up_attn.append(SelfAttention(rng, w, dtype=dtype) if has_attn else None)
            self.up_cross.append(
                CrossAttention(rng, w, cond_embed_dim, dtype=dtype)
                if has_attn and use_cross_attention else None
            )
            self.upsamplers.append(
                Conv(rng, spatial_dims, w, widths[i - 1], dtype=dtype) if i > 0 else None
            )

        self.out_norm = GroupNorm(widths[0], dtype=dtype)
        self.out_conv = Conv(rng, spatial_dims, widths[0], in_channels, dtype=dtype, zero_init=True)

    def _check_extent(self, shape):
        need = 2 ** (self.depth - 1)
        for e in shape[1:-1]:
            if e % need != 0:
                raise ValidationError(f"spatial extent {shape[1:-1]} not divisible by {need}")

    def __call__(self, x: Tensor, t: np.ndarray, class_vec: Tensor | None = None,
                 tokens: Tensor | None = None, token_mask: np.ndarray | None = None) -> Tensor:
        if x.ndim != self.spatial_dims + 2:
            raise ValidationError(
                f"expected {self.spatial_dims + 2}-d channels-last input, got shape {x.shape}"
            )
        if x.shape[-1] != self.in_channels:
            raise ValidationError(f"expected {self.in_channels} channels, got {x.shape[-1]}")
        self._check_extent(x.shape)

        dtype = self.stem.w.dtype
        temb = Tensor(timestep_embedding(t, self.time_embed_dim).astype(dtype))
        temb = self.time_mlp2(silu(self.time_mlp1(temb)))
        if class_vec is not None:
            if self.class_proj is None:
                raise ValidationError("model was built without class conditioning")
            temb = temb + self.class_proj(class_vec)
        if tokens is not None and not self.use_cross_attention:
            raise ValidationError("model was built without cross-attention")

        h = self.stem(x)
        skips = []
        for i in range(self.depth):
            h = self.down_blocks[i](h, temb)
            if self.down_attn[i] is not None:
                h = self.down_attn[i](h)
            if self.down_cross[i] is not None and tokens is not None:
                h = self.down_cross[i](h, tokens, token_mask)
            skips.append(h)
            if self.downsamplers[i] is not None:
                h = self.downsamplers[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        if self.mid_cross is not None and tokens is not None:
            h = self.mid_cross(h, tokens, token_mask)
        h = self.mid_block2(h, temb)

        for j, i in enumerate(reversed(range(self.depth))):
            h = ad.concat([h, skips[i]], axis=-1)
            h = self.up_blocks[j](h, temb)
            if self.up_attn[j] is not None:
                h = self.up_attn[j](h)
            if self.up_cross[j] is not None and tokens is not None:
                h = self.up_cross[j](h, tokens, token_mask)
            if self.upsamplers[j] is not None:
                h = ad.upsample_nearest(h)
                h = self.upsamplers[j](h)

        return self.out_conv(silu(self.out_norm(h)))
