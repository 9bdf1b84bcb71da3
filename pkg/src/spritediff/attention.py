"""Attention blocks for the denoiser.

Three mechanisms live here beside plain multi-head self/cross attention:

- ``GatedSelfAttention``: subject tokens are concatenated to the visual
  tokens, attended jointly, and only the visual rows are kept; the result
  enters the stream through a tanh gate whose parameter starts at 0, so a
  freshly initialized layer is exactly the identity.

- ``AugmentedTemporalAttention``: temporal 1-D attention (with internal
  residual) followed by two residual-free plane attentions over the
  temporal-horizontal [H, T*W, C] and temporal-vertical [W, T*H, C]
  reshapes of the temporal output; the layer returns
  attn(z_TX) + attn(z_TY) + z_T + z_i.

- ``FeedForward``: the usual GEGLU-free MLP tail of a transformer block.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from einops import rearrange


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention with separate q/k/v/out linear maps.

    No internal normalization or residual; callers own both.
    """

    def __init__(self, dim: int, num_heads: int = 4, context_dim: int | None = None):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        context_dim = context_dim or dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        attn_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        # x: [B, N, dim], context: [B, M, context_dim], attn_mask: additive [N, M]
        context = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.num_heads)
        k = rearrange(self.to_k(context), "b m (h d) -> b h m d", h=self.num_heads)
        v = rearrange(self.to_v(context), "b m (h d) -> b h m d", h=self.num_heads)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        out = scores.softmax(dim=-1) @ v
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class GatedSelfAttention(nn.Module):
    """z + tanh(gamma) * TS(SelfAttn([z, f_vl])).

    TS keeps exactly the first N output rows (the visual positions); the
    subject tokens only serve as extra keys/values. With M = 0 subject
    tokens this degenerates to z + tanh(gamma) * SelfAttn(z). gamma starts
    at ``gate_init`` (0 by default), making the layer an exact identity at
    initialization regardless of the subject tokens.
    """

    def __init__(self, dim: int, num_heads: int = 4, gate_init: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.gamma = nn.Parameter(torch.tensor(float(gate_init)))

    def forward(self, z: torch.Tensor, f_vl: torch.Tensor | None = None) -> torch.Tensor:
        # z: [B, N, dim] or [N, dim]; f_vl: [B, M, dim] / [M, dim] / None
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
            f_vl = None if f_vl is None else f_vl[None]
        n = z.shape[1]
        if f_vl is not None and f_vl.shape[1] > 0:
            if f_vl.shape[-1] != z.shape[-1]:
                raise ValueError(
                    f"feature dim mismatch: z {z.shape[-1]} vs f_vl {f_vl.shape[-1]}"
                )
            seq = torch.cat([z, f_vl.to(z.dtype)], dim=1)
        else:
            seq = z
        out = z + torch.tanh(self.gamma) * self.attn(seq)[:, :n]
        return out[0] if squeeze else out


class AugmentedTemporalAttention(nn.Module):
    """Temporal 1-D attention augmented with TX/TY plane attention.

    Input and output are [T, H, W, C]. The temporal branch attends along T
    at every spatial site and carries an internal residual (so zeroed
    temporal projections leave z_T = z_i). The plane branches attend over
    each of the H rows of the [H, T*W, C] reshape and each of the W columns
    of the [W, T*H, C] reshape of z_T, without residuals. All three branches
    have independent projection weights.
    """

    def __init__(self, dim: int, num_heads: int = 4):
        super().__init__()
        self.temporal = MultiHeadAttention(dim, num_heads)
        self.plane_tx = MultiHeadAttention(dim, num_heads)
        self.plane_ty = MultiHeadAttention(dim, num_heads)

    def zero_init_outputs(self) -> None:
        """Zero the three out-projections so the layer maps z_i to 2 * z_i."""
        for mod in (self.temporal, self.plane_tx, self.plane_ty):
            nn.init.zeros_(mod.to_out.weight)
            nn.init.zeros_(mod.to_out.bias)

    def forward(self, z_i: torch.Tensor) -> torch.Tensor:
        if z_i.ndim != 4:
            raise ValueError(f"expected [T, H, W, C], got {tuple(z_i.shape)}")
        t, h, w, _ = z_i.shape
        tokens = rearrange(z_i, "t h w c -> (h w) t c")
        z_t = z_i + rearrange(self.temporal(tokens), "(h w) t c -> t h w c", h=h, w=w)
        z_tx = rearrange(z_t, "t h w c -> h (t w) c")
        z_ty = rearrange(z_t, "t h w c -> w (t h) c")
        out_tx = rearrange(self.plane_tx(z_tx), "h (t w) c -> t h w c", t=t, w=w)
        out_ty = rearrange(self.plane_ty(z_ty), "w (t h) c -> t h w c", t=t, h=h)
        return out_tx + out_ty + z_t + z_i


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult),
            nn.SiLU(),
            nn.Linear(dim * mult, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
