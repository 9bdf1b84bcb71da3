"""Evaluation harness: controllability, diversity, temporal consistency,
and a Frechet feature-distribution distance.

All metrics are deterministic functions of (checkpoint weights, inputs,
seed). Crop embeddings come from the contrastively pretrained image
encoder; the probe detector used for alignment is trained on real scenes
only and shares no weights with the generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import toyworld
from .probe import ProbeDetector, ProbeSample, match_frame
from .sampling import SampleJob, generate_clip, pixels_to_u8
from .training import ModelBundle

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    alignment: float
    diversity: float
    temporal_consistency: float
    distribution_distance: float
    breakdown: dict

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# alignment (controllability)
# ---------------------------------------------------------------------------

def alignment_of_clips(
    pairs: Sequence[tuple[torch.Tensor, list]], probe: ProbeDetector, threshold: float = 0.3
) -> float:
    """Fraction of conditioned visible boxes matched by a correct-category
    detection with center inside the box, over (pixels, layout) pairs."""
    matched = total = 0
    for pixels, layout in pairs:
        for t in range(pixels.shape[0]):
            dets = probe.detect(pixels[t], threshold)
            m, _, ng = match_frame(dets, layout[t])
            matched += m
            total += ng
    return matched / total if total else 0.0


def alignment_score(
    bundle: ModelBundle,
    jobs: Sequence[SampleJob],
    probe: ProbeDetector,
    seed: int,
    ddim_steps: int = 25,
) -> float:
    """Generate one clip per job and score it against its own layout."""
    pairs = []
    for i, job in enumerate(jobs):
        pixels = generate_clip(bundle, job, ddim_steps=ddim_steps, seed=seed + i)
        pairs.append((pixels, job.layout))
    return alignment_of_clips(pairs, probe)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def _crop_embeddings(pixels: torch.Tensor, layout, encoder) -> dict[tuple, torch.Tensor]:
    """Embeddings of every conditioned crop, keyed by (frame, track)."""
    u8 = pixels_to_u8(pixels)
    out = {}
    for t in range(u8.shape[0]):
        crops, keys = [], []
        for lb in layout[t]:
            if not lb.visible or lb.box is None:
                continue
            crop = toyworld.crop_box(u8[t], lb.box).astype(np.float32) / 255.0 * 2.0 - 1.0
            crops.append(encoder.prepare(np.ascontiguousarray(crop.transpose(2, 0, 1)))[0])
            keys.append((t, lb.track_id))
        if crops:
            with torch.no_grad():
                z = F.normalize(encoder.embed_batch(torch.stack(crops)), dim=1)
            for key, row in zip(keys, z):
                out[key] = row
    return out


def diversity_score(
    groups: Sequence[tuple[list, Sequence[torch.Tensor]]], encoder
) -> float:
    """Mean pairwise embedding distance among crops generated for the same
    layout slot across repeated samples.

    ``groups``: (layout, clips) pairs where every clip was generated from
    that same layout. Requires at least 2 clips per layout.
    """
    dists = []
    for layout, clips in groups:
        if len(clips) < 2:
            raise ValueError("diversity_score needs >= 2 generated samples per layout")
        per_clip = [_crop_embeddings(c, layout, encoder) for c in clips]
        slots = set(per_clip[0])
        for pc in per_clip[1:]:
            slots &= set(pc)
        for key in sorted(slots):
            embs = torch.stack([pc[key] for pc in per_clip])
            d = torch.cdist(embs, embs)
            n = embs.shape[0]
            dists.append(float(d.sum() / (n * (n - 1))))
    return float(np.mean(dists)) if dists else 0.0


def catalogue_max_distance(encoder, identities: Optional[Sequence] = None) -> float:
    """Largest pairwise embedding distance over canonical catalogue crops;
    the calibrated ceiling for diversity_score."""
    identities = identities or (toyworld.internal_identities() + toyworld.external_identities())
    crops = []
    for identity in identities:
        rgb, mask = toyworld.render_sprite(identity)
        canvas = np.tile(np.array(toyworld._STYLE_COLORS["day"]["road"], dtype=np.uint8), (*mask.shape, 1))
        canvas[mask] = rgb[mask]
        crop = canvas.astype(np.float32) / 255.0 * 2.0 - 1.0
        crops.append(encoder.prepare(np.ascontiguousarray(crop.transpose(2, 0, 1)))[0])
    with torch.no_grad():
        z = F.normalize(encoder.embed_batch(torch.stack(crops)), dim=1)
    return float(torch.cdist(z, z).max())


# ---------------------------------------------------------------------------
# temporal consistency
# ---------------------------------------------------------------------------

def temporal_consistency_score(pixels: torch.Tensor, layout, encoder) -> float:
    """Mean cosine similarity of per-frame crop embeddings within each track
    (all unordered pairs), averaged over tracks with >= 2 visible frames."""
    embs = _crop_embeddings(pixels, layout, encoder)
    by_track: dict[int, list[torch.Tensor]] = {}
    for (t, track), z in embs.items():
        by_track.setdefault(track, []).append(z)
    scores = []
    for track, rows in by_track.items():
        if len(rows) < 2:
            continue  # single-frame tracks contribute nothing
        z = torch.stack(rows)
        sim = z @ z.t()
        n = z.shape[0]
        scores.append(float((sim.sum() - sim.trace()) / (n * (n - 1))))
    if not scores:
        raise ValueError("no multi-frame tracks in the clip")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# distribution distance (Frechet)
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray, eps: float = 1e-6
) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the square root
    computed by eigendecomposition and negative eigenvalues clamped at 0."""
    for name, sigma in (("first", sigma1), ("second", sigma2)):
        if np.linalg.eigvalsh(sigma).min() < 1e-8:
            log.warning("degenerate %s covariance; regularizing with eps=%g", name, eps)
    sigma1 = sigma1 + eps * np.eye(sigma1.shape[0])
    sigma2 = sigma2 + eps * np.eye(sigma2.shape[0])
    s2h = _sqrtm_psd(sigma2)
    inner = s2h @ sigma1 @ s2h
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_term = float(np.sqrt(vals).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_term)
    return max(value, 0.0)


def distribution_distance(
    generated_frames: torch.Tensor, real_frames: torch.Tensor, encoder, min_count: int = 64
) -> float:
    """Frechet distance between Gaussians fitted to encoder features of the
    two frame sets ([N, 3, H, W] each, N >= 64)."""
    if generated_frames.shape[0] < min_count or real_frames.shape[0] < min_count:
        raise ValueError(f"need >= {min_count} frames per side")
    with torch.no_grad():
        zg = encoder.embed_batch(generated_frames).cpu().numpy().astype(np.float64)
        zr = encoder.embed_batch(real_frames).cpu().numpy().astype(np.float64)
    mu_g, mu_r = zg.mean(axis=0), zr.mean(axis=0)
    cov_g = np.cov(zg, rowvar=False)
    cov_r = np.cov(zr, rowvar=False)
    return frechet_distance(mu_g, cov_g, mu_r, cov_r)
