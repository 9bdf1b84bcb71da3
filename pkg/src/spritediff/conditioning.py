"""Per-sample conditioning assembly shared by training and sampling.

A ``ConditioningBundle`` carries everything the denoiser consumes for one
clip: per-frame fused prompt embeddings, per-frame location-enhanced
subject tokens, the rasterized layout maps, and the target latent shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import subjects as subj
from . import text as textmod
from . import toyworld
from .subjects import BankAssignment, SubjectEmbedding


class SubjectConditioner(nn.Module):
    """Bundles the prompt/visual encoders and adapter heads."""

    def __init__(
        self,
        vocab: Optional[textmod.Vocabulary] = None,
        d: int = 128,
        max_len: int = 32,
        codebook_size: int = 64,
        num_freqs: int = 8,
        image_encoder: Optional[subj.SubjectImageEncoder] = None,
    ):
        super().__init__()
        self.vocab = vocab or textmod.default_vocabulary()
        self.d = d
        self.max_len = max_len
        self.codebook_size = codebook_size
        self.text_encoder = textmod.TextEncoder(len(self.vocab), d=d, max_len=max_len)
        self.id_encoder = subj.SubjectIdEncoder(codebook_size=codebook_size, d=d)
        self.image_encoder = image_encoder if image_encoder is not None else subj.SubjectImageEncoder(d=d)
        self.fusion_mlp = subj.FusionMlp(d=d)
        self.vl_mlp = subj.LocationFusion(d=d, d_model=d, num_freqs=num_freqs)

    def freeze_image_trunk(self) -> None:
        """Keep the contrastively pretrained trunk fixed; adapter heads train."""
        for p in self.image_encoder.trunk.parameters():
            p.requires_grad_(False)

    def encode_prompt(self, scene_prompt: str, entries) -> tuple[textmod.ExtendedPrompt, torch.Tensor]:
        """entries: sequence of (category, codebook_id, crop)."""
        ep = textmod.build_extended_prompt(
            scene_prompt, [e[0] for e in entries], self.vocab, self.max_len
        )
        z_t = self.text_encoder(ep.token_ids)
        per_subject = []
        for (slot_idx, pos), (_, cb_id, crop) in zip(ep.subject_slots, entries):
            emb = SubjectEmbedding(
                z_id=self.id_encoder(cb_id),
                z_v=self.image_encoder.encode_pooled(crop),
            )
            per_subject.append((pos, emb))
        fused = subj.fuse_subject_prompt(z_t, per_subject, self.fusion_mlp)
        return ep, fused

    def subject_token(self, crop, box) -> torch.Tensor:
        f_v = self.image_encoder.encode_spatial(crop)
        return self.vl_mlp(f_v, box)


@dataclass
class ConditioningBundle:
    fused_text: torch.Tensor                      # [T, L, d]
    subject_tokens: list                          # per frame: [M_t, d] tensor or None
    control_maps: Optional[torch.Tensor]          # [T, C_cond, H, W] or None
    latent_shape: tuple[int, ...]


def assemble_conditioning(
    layout,
    scene_prompt: str,
    assignment: dict[int, BankAssignment],
    conditioner: SubjectConditioner,
    resolution: tuple[int, int],
    latent_shape: tuple[int, ...],
    drop_text: bool = False,
    drop_layout: bool = False,
    frames: Optional[list[int]] = None,
) -> ConditioningBundle:
    """Build the conditioning bundle for (a subset of) a clip's frames.

    Per frame, the prompt lists the visible subjects of that frame; the
    subject tokens mirror the same visible set in layout order. Text dropout
    swaps in the empty-prompt embedding and removes subject tokens; layout
    dropout zeroes the control maps.
    """
    frame_indices = frames if frames is not None else list(range(len(layout)))
    fused_rows = []
    token_rows: list = []
    for t in frame_indices:
        visible = [lb for lb in layout[t] if lb.visible and lb.box is not None]
        if drop_text:
            ep = textmod.build_extended_prompt("", [], conditioner.vocab, conditioner.max_len)
            fused_rows.append(conditioner.text_encoder(ep.token_ids))
            token_rows.append(None)
            continue
        entries = []
        toks = []
        for lb in visible:
            a = assignment[lb.track_id]
            entries.append((lb.category, a.codebook_id, a.record.reference_image))
            toks.append(conditioner.subject_token(a.record.reference_image, lb.box))
        _, fused = conditioner.encode_prompt(scene_prompt, entries)
        fused_rows.append(fused)
        token_rows.append(torch.stack(toks) if toks else None)
    fused_text = torch.stack(fused_rows)
    sub_layout = [layout[t] for t in frame_indices]
    if drop_layout:
        maps = torch.zeros(len(frame_indices), 3, *resolution)
    else:
        maps = torch.from_numpy(toyworld.render_layout_condition(sub_layout, resolution))
    return ConditioningBundle(
        fused_text=fused_text,
        subject_tokens=token_rows,
        control_maps=maps,
        latent_shape=tuple(latent_shape),
    )


def training_assignment(scene: toyworld.ToyScene, bank_index: dict) -> dict[int, BankAssignment]:
    """Training uses the internal bank record of the scene's own tracks, with
    the layout track id as codebook id."""
    assignment = {}
    for track_id in scene.identities:
        rec = bank_index.get((scene.seed, track_id))
        if rec is None:
            raise KeyError(f"internal bank has no record for scene {scene.seed} track {track_id}")
        assignment[track_id] = BankAssignment(record=rec, codebook_id=track_id)
    return assignment


def bank_index_by_source(bank) -> dict:
    """(scene_seed, track_id) -> internal record."""
    return {(rec.source[0], rec.track_id): rec for rec in bank if rec.source is not None}
