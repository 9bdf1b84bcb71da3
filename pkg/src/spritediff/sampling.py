"""Clip generation from a trained bundle, plus contact sheets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import diffusion
from .conditioning import assemble_conditioning
from .subjects import BankAssignment, sample_bank_subjects
from .training import ModelBundle
from .toyworld import LayoutSequence, ToyScene


@dataclass
class SampleJob:
    layout: LayoutSequence
    prompt: str
    assignment: dict[int, BankAssignment]
    resolution: tuple[int, int]
    seed: int = 0


def make_jobs(
    scenes: Sequence[ToyScene],
    bank,
    external_ratio: float,
    seed: int,
    codebook_size: int = 64,
) -> list[SampleJob]:
    """One job per scene layout, with bank subjects drawn per job seed."""
    jobs = []
    for i, scene in enumerate(scenes):
        assignment = sample_bank_subjects(
            bank, scene.layout, external_ratio, seed + i, codebook_size
        )
        jobs.append(
            SampleJob(
                layout=scene.layout,
                prompt=scene.scene_prompt,
                assignment=assignment,
                resolution=tuple(scene.spec.resolution),
                seed=seed + i,
            )
        )
    return jobs


def generate_clip(
    bundle: ModelBundle,
    job: SampleJob,
    ddim_steps: int = 25,
    seed: Optional[int] = None,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """DDIM-sample one clip; returns pixels [T, 3, H, W] in [-1, 1]."""
    num_frames = len(job.layout)
    latent_shape = bundle.latent_shape(num_frames, job.resolution)
    with torch.no_grad():
        cond = assemble_conditioning(
            job.layout, job.prompt, job.assignment, bundle.conditioner,
            job.resolution, latent_shape,
        )
        uncond = None
        if guidance_scale != 1.0:
            uncond = assemble_conditioning(
                job.layout, job.prompt, job.assignment, bundle.conditioner,
                job.resolution, latent_shape, drop_text=True, drop_layout=True,
            )
        lat = diffusion.ddim_sample(
            bundle.denoiser_fn(temporal=True),
            cond,
            bundle.schedule,
            ddim_steps,
            job.seed if seed is None else seed,
            guidance_scale=guidance_scale,
            uncond=uncond,
        )
        return bundle.decode_scaled(lat)


def pixels_to_u8(pixels: torch.Tensor) -> np.ndarray:
    """[T, 3, H, W] in [-1, 1] -> uint8 [T, H, W, 3]."""
    x = ((pixels.clamp(-1, 1) + 1) / 2 * 255).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def contact_sheet(clips: Sequence[torch.Tensor], upscale: int = 4, pad: int = 2) -> Image.Image:
    """Tile clips for visual inspection: one row per clip, frames
    left-to-right, nearest-neighbor upscaled."""
    u8 = [pixels_to_u8(c) for c in clips]
    t, h, w = u8[0].shape[0], u8[0].shape[1], u8[0].shape[2]
    sheet = np.full(
        (len(u8) * (h + pad) + pad, t * (w + pad) + pad, 3), 24, dtype=np.uint8
    )
    for r, clip in enumerate(u8):
        for c in range(clip.shape[0]):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            sheet[y : y + h, x : x + w] = clip[c]
    img = Image.fromarray(sheet)
    return img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
