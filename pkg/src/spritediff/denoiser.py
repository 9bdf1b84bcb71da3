"""The trainable UNet denoiser and the layout control branch.

Each attention-bearing resolution hosts, in fixed order: spatial
self-attention, gated self-attention (subject token injection),
cross-attention over the fused prompt embedding, a feed-forward tail, and
the augmented temporal attention. The batch dimension of the latent input
is the frame axis of one clip; temporal layers are skipped entirely when
``temporal=False`` (single-frame training).

The control branch is a small conv encoder over the rasterized layout maps
whose per-resolution outputs pass through zero-initialized projections, so
a fresh branch contributes exactly nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from einops import rearrange

from .attention import (
    AugmentedTemporalAttention,
    FeedForward,
    GatedSelfAttention,
    MultiHeadAttention,
)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (0, 1)
    text_dim: int = 128
    num_heads: int = 4
    gate_init: float = 0.0
    # control branch input
    cond_channels: int = 3
    pixel_to_latent_factor: int = 4

    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly per-sample) integer timesteps."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatioTemporalBlock(nn.Module):
    """Token-space block: self-attn, gated self-attn, cross-attn, FF, ATA."""

    sublayer_order = (
        "self_attention",
        "gated_self_attention",
        "cross_attention",
        "feed_forward",
        "augmented_temporal_attention",
    )

    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        heads = cfg.num_heads
        self.norm_in = nn.GroupNorm(8, channels)
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, heads)
        self.gated = GatedSelfAttention(channels, heads, gate_init=cfg.gate_init)
        self.subject_proj = nn.Linear(cfg.text_dim, channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, heads, context_dim=cfg.text_dim)
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.temporal = AugmentedTemporalAttention(channels, heads)
        self.temporal.zero_init_outputs()

    def forward(
        self,
        x: torch.Tensor,
        text_emb: torch.Tensor,
        subject_tokens=None,
        temporal: bool = True,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        z = rearrange(self.norm_in(x), "b c h w -> b (h w) c")
        z = z + self.self_attn(self.norm_self(z))
        if subject_tokens is None:
            z = self.gated(z)
        else:
            if len(subject_tokens) != b:
                raise ValueError(f"{len(subject_tokens)} subject token sets for batch of {b}")
            rows = []
            for i in range(b):
                f = subject_tokens[i]
                if f is None or f.shape[0] == 0:
                    rows.append(self.gated(z[i : i + 1]))
                else:
                    rows.append(self.gated(z[i : i + 1], self.subject_proj(f)[None]))
            z = torch.cat(rows, dim=0)
        if text_emb.ndim == 2:
            text_emb = text_emb[None].expand(b, -1, -1)
        elif text_emb.shape[0] != b:
            raise ValueError(f"text batch {text_emb.shape[0]} != frame batch {b}")
        z = z + self.cross_attn(self.norm_cross(z), text_emb)
        z = z + self.ff(self.norm_ff(z))
        if temporal:
            z = self.temporal(rearrange(z, "t (h w) c -> t h w c", h=h, w=w))
            z = rearrange(z, "t h w c -> t (h w) c")
        return x + rearrange(z, "b (h w) c -> b c h w", h=h, w=w)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ControlBranch(nn.Module):
    """Layout-map encoder emitting zero-initialized per-resolution residuals."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chans = cfg.channels()
        self.time_dim = cfg.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, self.time_dim), nn.SiLU(),
            nn.Linear(self.time_dim, self.time_dim),
        )
        stem = []
        c_in, c = cfg.cond_channels, cfg.base_channels // 2
        for _ in range(int(math.log2(cfg.pixel_to_latent_factor))):
            stem += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.SiLU()]
            c_in, c = c, cfg.base_channels
        self.stem = nn.Sequential(*stem)
        self.blocks = nn.ModuleList()
        self.zero_projs = nn.ModuleList()
        c_prev = c_in
        for level, c_out in enumerate(chans):
            stride = 1 if level == 0 else 2
            self.blocks.append(
                nn.Sequential(nn.Conv2d(c_prev, c_out, 3, stride=stride, padding=1), nn.SiLU(),
                              nn.Conv2d(c_out, c_out, 3, padding=1), nn.SiLU())
            )
            proj = nn.Conv2d(c_out, c_out, 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.zero_projs.append(proj)
            c_prev = c_out
        self.time_to_stem = nn.Linear(self.time_dim, c_in)

    def forward(self, layout_maps: torch.Tensor, t) -> list[torch.Tensor]:
        t_emb = self.time_mlp(timestep_embedding(t, self.time_mlp[0].in_features).to(layout_maps.dtype))
        if t_emb.shape[0] == 1 and layout_maps.shape[0] > 1:
            t_emb = t_emb.expand(layout_maps.shape[0], -1)
        h = self.stem(layout_maps)
        h = h + self.time_to_stem(t_emb)[:, :, None, None]
        residuals = []
        for block, proj in zip(self.blocks, self.zero_projs):
            h = block(h)
            residuals.append(proj(h))
        return residuals


class UNetDenoiser(nn.Module):
    """Noise predictor over latent clips [T, C, H, W]."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        time_dim = cfg.base_channels * 4
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        c_prev = chans[0]
        for level, c in enumerate(chans):
            self.down_res.append(ResBlock(c_prev, c, time_dim))
            self.down_attn.append(
                SpatioTemporalBlock(c, cfg) if level in cfg.attention_levels else None
            )
            self.downsamplers.append(Downsample(c) if level < len(chans) - 1 else None)
            c_prev = c

        c_mid = chans[-1]
        self.mid_res1 = ResBlock(c_mid, c_mid, time_dim)
        self.mid_attn = SpatioTemporalBlock(c_mid, cfg)
        self.mid_res2 = ResBlock(c_mid, c_mid, time_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        c_prev = c_mid
        for level in reversed(range(len(chans))):
            c = chans[level]
            self.up_res.append(ResBlock(c_prev + c, c, time_dim))
            self.up_attn.append(
                SpatioTemporalBlock(c, cfg) if level in cfg.attention_levels else None
            )
            self.upsamplers.append(Upsample(c) if level > 0 else None)
            c_prev = c

        self.norm_out = nn.GroupNorm(8, chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def gated_layers(self) -> list[GatedSelfAttention]:
        blocks = [b for b in list(self.down_attn) + [self.mid_attn] + list(self.up_attn) if b is not None]
        return [b.gated for b in blocks]

    def set_gates(self, value: float) -> None:
        for g in self.gated_layers():
            with torch.no_grad():
                g.gamma.fill_(value)

    def forward(
        self,
        x: torch.Tensor,
        t,
        text_emb: torch.Tensor,
        subject_tokens=None,
        control=None,
        temporal: bool = True,
    ) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [T, {self.cfg.in_channels}, H, W], got {tuple(x.shape)}")
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))
        if t_emb.shape[0] == 1 and x.shape[0] > 1:
            t_emb = t_emb.expand(x.shape[0], -1)
        elif t_emb.shape[0] not in (1, x.shape[0]):
            raise ValueError(f"{t_emb.shape[0]} timesteps for batch of {x.shape[0]}")

        h = self.conv_in(x)
        skips = []
        for level in range(len(self.down_res)):
            h = self.down_res[level](h, t_emb)
            if self.down_attn[level] is not None:
                h = self.down_attn[level](h, text_emb, subject_tokens, temporal)
            if control is not None:
                h = h + control[level]
            skips.append(h)
            if self.downsamplers[level] is not None:
                h = self.downsamplers[level](h)

        h = self.mid_res1(h, t_emb)
        h = self.mid_attn(h, text_emb, subject_tokens, temporal)
        h = self.mid_res2(h, t_emb)

        for i in range(len(self.up_res)):
            h = torch.cat([h, skips[-1 - i]], dim=1)
            h = self.up_res[i](h, t_emb)
            if self.up_attn[i] is not None:
                h = self.up_attn[i](h, text_emb, subject_tokens, temporal)
            if self.upsamplers[i] is not None:
                h = self.upsamplers[i](h)

        return self.conv_out(nn.functional.silu(self.norm_out(h)))
