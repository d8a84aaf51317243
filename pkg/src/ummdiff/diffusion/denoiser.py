"""Small two-resolution U-Net noise predictor with cross-attention conditioning."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import numerics as nx
from ..numerics.layers import Conv2d, GroupNorm, LayerNorm, Linear, Module, MultiHeadAttention


@dataclass
class DenoiserConfig:
    channels: int = 32
    context_dim: int = 64
    context_len: int = 16
    heads: int = 4
    time_dim: int = 128
    groups: int = 8
    image_size: int = 16
    image_channels: int = 3

    def to_dict(self):
        return asdict(self)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, ``(B, dim)``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class ResBlock(Module):
    def __init__(self, store, name, c_in, c_out, time_dim, groups, rng):
        super().__init__(store, name)
        self.norm1 = GroupNorm(store, f"{name}.norm1", c_in, groups)
        self.conv1 = Conv2d(store, f"{name}.conv1", c_in, c_out, rng)
        self.temb = Linear(store, f"{name}.temb", time_dim, c_out, rng)
        self.norm2 = GroupNorm(store, f"{name}.norm2", c_out, groups)
        self.conv2 = Conv2d(store, f"{name}.conv2", c_out, c_out, rng, scale=0.1)
        self.skip = Conv2d(store, f"{name}.skip", c_in, c_out, rng, kernel=1) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(nx.silu(self.norm1(x)))
        b, _, _, c = h.shape
        h = h + self.temb(temb).reshape(b, 1, 1, c)
        h = self.conv2(nx.silu(self.norm2(h)))
        return (self.skip(x) if self.skip else x) + h


class CrossAttention(Module):
    """Spatial features attend to the conditioning sequence."""

    def __init__(self, store, name, channels, context_dim, heads, rng):
        super().__init__(store, name)
        self.norm = LayerNorm(store, f"{name}.norm", channels)
        self.attn = MultiHeadAttention(store, f"{name}.attn", channels, context_dim, channels, heads, rng)

    def __call__(self, x, context):
        b, h, w, c = x.shape
        tokens = x.reshape(b, h * w, c)
        out = self.attn(self.norm(tokens), context)
        return x + out.reshape(b, h, w, c)


class Denoiser(Module):
    """eps_theta(x_t, cond, t) for channels-last images.

    ``cond`` is a ``(B, L, d)`` hidden sequence; rows flagged in ``null_mask``
    (or every row when ``cond`` is None) use the learned null condition.
    """

    def __init__(self, store, cfg: DenoiserConfig, rng, name="denoiser"):
        super().__init__(store, name)
        self.cfg = cfg
        c, td, g = cfg.channels, cfg.time_dim, cfg.groups
        self.add("null_context", rng.normal(0, 0.5, (cfg.context_len, cfg.context_dim)))
        self.time1 = Linear(store, f"{name}.time1", td // 2, td, rng)
        self.time2 = Linear(store, f"{name}.time2", td, td, rng)
        self.conv_in = Conv2d(store, f"{name}.conv_in", cfg.image_channels, c, rng)
        self.down16 = ResBlock(store, f"{name}.down16", c, c, td, g, rng)
        self.downsample = Conv2d(store, f"{name}.downsample", c, c, rng, stride=2)
        self.down8 = ResBlock(store, f"{name}.down8", c, 2 * c, td, g, rng)
        self.attn_down8 = CrossAttention(store, f"{name}.attn_down8", 2 * c, cfg.context_dim, cfg.heads, rng)
        self.mid = ResBlock(store, f"{name}.mid", 2 * c, 2 * c, td, g, rng)
        self.attn_mid = CrossAttention(store, f"{name}.attn_mid", 2 * c, cfg.context_dim, cfg.heads, rng)
        self.up8 = ResBlock(store, f"{name}.up8", 4 * c, 2 * c, td, g, rng)
        self.attn_up8 = CrossAttention(store, f"{name}.attn_up8", 2 * c, cfg.context_dim, cfg.heads, rng)
        self.upsample = Conv2d(store, f"{name}.upsample", 2 * c, c, rng)
        self.up16 = ResBlock(store, f"{name}.up16", 2 * c, c, td, g, rng)
        self.attn_up16 = CrossAttention(store, f"{name}.attn_up16", c, cfg.context_dim, cfg.heads, rng)
        self.norm_out = GroupNorm(store, f"{name}.norm_out", c, g)
        self.conv_out = Conv2d(store, f"{name}.conv_out", c, cfg.image_channels, rng, scale=0.1)

    def context(self, cond, null_mask, batch: int) -> nx.Tensor:
        null = self.p("null_context")
        if cond is None:
            # broadcasts over the batch inside attention
            return null.reshape(1, *null.shape)
        cond = cond if isinstance(cond, nx.Tensor) else nx.Tensor(cond)
        if cond.shape[0] != batch or cond.shape[2] != self.cfg.context_dim:
            raise nx.ShapeError(f"condition shape {cond.shape} does not match batch {batch} "
                                f"and context width {self.cfg.context_dim}")
        if null_mask is None or not np.any(null_mask):
            return cond
        return nx.where(np.asarray(null_mask, bool)[:, None, None], null, cond)

    def __call__(self, x, t, cond=None, null_mask=None) -> nx.Tensor:
        x = x if isinstance(x, nx.Tensor) else nx.Tensor(x)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.image_channels):
            raise nx.ShapeError(f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, "
                                f"{cfg.image_channels}), got {x.shape}")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        ctx = self.context(cond, null_mask, b)
        temb = self.time2(nx.silu(self.time1(nx.Tensor(timestep_embedding(t, cfg.time_dim // 2)))))
        h0 = self.conv_in(x)
        h16 = self.down16(h0, temb)
        h = self.downsample(h16)
        h8 = self.attn_down8(self.down8(h, temb), ctx)
        h = self.attn_mid(self.mid(h8, temb), ctx)
        h = self.attn_up8(self.up8(nx.concat([h, h8], axis=-1), temb), ctx)
        h = self.upsample(nx.upsample2x(h))
        h = self.attn_up16(self.up16(nx.concat([h, h16], axis=-1), temb), ctx)
        return self.conv_out(nx.silu(self.norm_out(h)))
