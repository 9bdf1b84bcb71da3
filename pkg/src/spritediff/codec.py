"""Small frozen convolutional autoencoder bridging pixels and latents.

The encoder emits the mean of its output distribution directly (no sampled
latent noise), so encode/decode are deterministic pure functions of
(input, weights). After training the weights are frozen; the diffusion
trainer checks the weight hash before and after to enforce that.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 24

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")


class FrameAutoencoder(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        import math

        n_down = int(math.log2(cfg.downsample_factor))
        enc = []
        c_in, c = 3, cfg.base_channels
        for _ in range(n_down):
            enc += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.SiLU()]
            c_in, c = c, c * 2
        enc += [nn.Conv2d(c_in, c_in, 3, padding=1), nn.SiLU(),
                nn.Conv2d(c_in, cfg.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(cfg.latent_channels, c_in, 1), nn.SiLU()]
        for _ in range(n_down):
            c_out = max(cfg.base_channels, c_in // 2)
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c_in, c_out, 3, padding=1), nn.SiLU()]
            c_in = c_out
        dec += [nn.Conv2d(c_in, 3, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def freeze(self) -> "FrameAutoencoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def encode(frames: torch.Tensor, codec: FrameAutoencoder) -> torch.Tensor:
    """Pixels [T, 3, H, W] in [-1, 1] -> latents [T, C_lat, H/f, W/f]."""
    f = codec.cfg.downsample_factor
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected [T, 3, H, W], got {tuple(frames.shape)}")
    if frames.shape[2] % f or frames.shape[3] % f:
        raise ValueError(f"spatial shape {tuple(frames.shape[2:])} not divisible by {f}")
    return codec.encoder(frames)


def decode(latent: torch.Tensor, codec: FrameAutoencoder) -> torch.Tensor:
    """Latents -> pixels in [-1, 1] at the upsampled shape."""
    if latent.ndim != 4 or latent.shape[1] != codec.cfg.latent_channels:
        raise ValueError(
            f"latent channels {latent.shape[1] if latent.ndim == 4 else '?'} "
            f"!= configured {codec.cfg.latent_channels}"
        )
    return codec.decoder(latent)


def train_codec(
    frames: Sequence[np.ndarray] | np.ndarray | torch.Tensor,
    cfg: CodecConfig = CodecConfig(),
    steps: int = 5000,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 16,
) -> FrameAutoencoder:
    """Train the autoencoder on frames (reconstruction MSE), then freeze it.

    steps=0 returns the (frozen) seed-deterministic initialization.
    """
    data = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("need a non-empty [N, 3, H, W] frame array")
    torch.manual_seed(seed)
    codec = FrameAutoencoder(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps), eta_min=lr * 0.02)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        batch = data[idx]
        recon = decode(encode(batch, codec), codec)
        loss = ((recon - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    return codec.freeze()


def reconstruction_psnr(codec: FrameAutoencoder, frames: torch.Tensor) -> float:
    """PSNR in dB measured on [0, 1]-rescaled pixels."""
    with torch.no_grad():
        recon = decode(encode(frames, codec), codec)
    mse = (((recon - frames) / 2.0) ** 2).mean().item()
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def weights_hash(module: nn.Module) -> str:
    """Order-stable sha256 over the module's parameter and buffer bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype(np.float32, copy=False).tobytes())
    return h.hexdigest()


def latent_scale(codec: FrameAutoencoder, frames: torch.Tensor) -> float:
    """1 / std of encoded latents; diffusion runs on scaled latents."""
    with torch.no_grad():
        z = encode(frames, codec)
    return float(1.0 / z.std().clamp_min(1e-8))
