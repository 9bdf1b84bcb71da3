"""Subject control: prompt-side fusion, location-enhanced tokens, and banks.

Two injection routes share the encoders defined here:

- prompt route: a subject's category token row z_t[slot] is replaced by
  MLP([z_t[slot] + z_id, z_v]), where z_id comes from a learnable id
  codebook + adapter and z_v from the compact image encoder. All other rows
  pass through untouched.

- visual route: the image encoder's pre-pooling feature f_v is concatenated
  with a Fourier encoding of the subject's frame box and projected to the
  token width; these location-enhanced tokens feed the denoiser's gated
  self-attention layers.

Subject banks are catalogues of reference crops: the internal bank is
harvested from training scenes; the external bank is rendered from the
reserved disjoint identity pool and only ever mixed in at sampling time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import toyworld
from .toyworld import Box, SpriteIdentity, ToyScene


@dataclass
class SubjectRecord:
    track_id: int
    category: str
    reference_image: np.ndarray  # float32 [3, h, w] in [-1, 1]
    provenance: str              # "internal" | "external"
    identity: Optional[SpriteIdentity] = None
    source: Optional[tuple] = None  # (scene_seed, frame_index) for internal records

    def __post_init__(self):
        if self.provenance not in ("internal", "external"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        if self.category not in toyworld.CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


# ---------------------------------------------------------------------------
# encoders and adapters
# ---------------------------------------------------------------------------

class SubjectIdEncoder(nn.Module):
    """Learnable id codebook followed by an MLP adapter."""

    def __init__(self, codebook_size: int = 64, code_dim: int = 64, d: int = 128):
        super().__init__()
        self.codebook_size = codebook_size
        self.codebook = nn.Embedding(codebook_size, code_dim)
        self.adapter = nn.Sequential(nn.Linear(code_dim, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, track_id: int) -> torch.Tensor:
        if not 0 <= track_id < self.codebook_size:
            raise ValueError(f"track id {track_id} outside codebook [0, {self.codebook_size})")
        idx = torch.tensor(track_id, device=self.codebook.weight.device)
        return self.adapter(self.codebook(idx))


class SubjectImageEncoder(nn.Module):
    """Shared 4-layer conv trunk with two adapter heads.

    ``encode_pooled`` (z_v) pools the trunk feature map and projects it to d
    for prompt fusion; ``encode_spatial`` (f_v) projects the pre-pooling
    feature map for the location-enhanced tokens. Crops of any size are
    resized to ``input_size`` first.
    """

    def __init__(self, d: int = 128, input_size: int = 16, trunk_channels: int = 64):
        super().__init__()
        self.input_size = input_size
        c = trunk_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
        )
        feat = input_size // 4
        self.pooled_adapter = nn.Sequential(nn.Linear(c, d), nn.SiLU(), nn.Linear(d, d))
        self.spatial_adapter = nn.Linear(c * feat * feat, d)

    def prepare(self, crop) -> torch.Tensor:
        """Crop (np [3,h,w] in [-1,1] or tensor) -> [1, 3, S, S] on the right
        device/dtype."""
        x = torch.as_tensor(np.asarray(crop), dtype=torch.float32)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected a [3, h, w] crop, got {tuple(x.shape)}")
        p = next(self.parameters())
        x = x[None].to(device=p.device, dtype=p.dtype)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size),
                              mode="bilinear", align_corners=False)
        return x

    def features(self, crop) -> torch.Tensor:
        return self.trunk(self.prepare(crop))

    def encode_pooled(self, crop) -> torch.Tensor:
        """z_v: [d], unit norm (the contrastive objective shapes directions)."""
        return F.normalize(self.pooled_adapter(self.features(crop).mean(dim=(2, 3))), dim=1)[0]

    def encode_spatial(self, crop) -> torch.Tensor:
        """f_v: [d]"""
        return self.spatial_adapter(self.features(crop).flatten(1))[0]

    def embed_batch(self, images: torch.Tensor) -> torch.Tensor:
        """Unit-norm pooled embeddings for a [N, 3, h, w] batch."""
        if images.shape[-2:] != (self.input_size, self.input_size):
            images = F.interpolate(images, size=(self.input_size, self.input_size),
                                   mode="bilinear", align_corners=False)
        return F.normalize(self.pooled_adapter(self.trunk(images).mean(dim=(2, 3))), dim=1)


def fourier_encode(box, num_freqs: int = 8) -> torch.Tensor:
    """Fixed sinusoidal encoding of box coordinates.

    For each coordinate c and frequency f_k = 2**k the pair
    (sin(pi f_k c), cos(pi f_k c)) is emitted, coordinate-major and
    frequency-minor, giving a vector of length 8 * num_freqs.
    """
    coords = box.as_tuple() if isinstance(box, Box) else tuple(box)
    if len(coords) != 4:
        raise ValueError(f"expected 4 coordinates, got {len(coords)}")
    for c in coords:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"coordinate {c} outside [0, 1]")
    out = torch.empty(8 * num_freqs, dtype=torch.float64)
    i = 0
    for c in coords:
        for k in range(num_freqs):
            angle = torch.pi * (2.0**k) * c
            out[i] = np.sin(angle)
            out[i + 1] = np.cos(angle)
            i += 2
    return out.to(torch.float32)


class LocationFusion(nn.Module):
    """f_vl = MLP([f_v, Fourier(box)]) -> token of width d_model."""

    def __init__(self, d: int = 128, d_model: int = 128, num_freqs: int = 8):
        super().__init__()
        self.num_freqs = num_freqs
        self.mlp = nn.Sequential(
            nn.Linear(d + 8 * num_freqs, d_model), nn.SiLU(), nn.Linear(d_model, d_model)
        )

    def forward(self, f_v: torch.Tensor, box) -> torch.Tensor:
        enc = fourier_encode(box, self.num_freqs).to(device=f_v.device, dtype=f_v.dtype)
        return self.mlp(torch.cat([f_v, enc]))


def location_enhanced_embedding(f_v: torch.Tensor, box, vl_mlp: LocationFusion) -> torch.Tensor:
    return vl_mlp(f_v, box)


@dataclass(frozen=True)
class SubjectEmbedding:
    z_id: torch.Tensor  # [d]
    z_v: torch.Tensor   # [d]


def fuse_subject_prompt(
    z_t: torch.Tensor,
    per_subject: Sequence[tuple[int, SubjectEmbedding]],
    fusion_mlp,
) -> torch.Tensor:
    """Replace subject slot rows of a text embedding with fused rows.

    Each (slot, embedding) pair produces MLP([z_t[slot] + z_id, z_v]); rows
    outside the slots are returned unchanged (same storage values, fresh
    tensor). An empty subject list is the identity.
    """
    fused = z_t.clone()
    seen = set()
    for slot, emb in per_subject:
        if not 0 <= slot < z_t.shape[0]:
            raise ValueError(f"slot {slot} outside embedding of length {z_t.shape[0]}")
        if slot in seen:
            raise ValueError(f"duplicate slot {slot}")
        seen.add(slot)
        row = torch.cat([z_t[slot] + emb.z_id, emb.z_v])
        fused[slot] = fusion_mlp(row)
    return fused


class FusionMlp(nn.Module):
    def __init__(self, d: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# contrastive pretraining of the image encoder
# ---------------------------------------------------------------------------

def _augment_crop(crop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shift by up to 2 px (background padding) plus light pixel noise."""
    c, h, w = crop.shape
    dy, dx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    out = np.full_like(crop, crop[:, 0, 0][:, None, None])
    ys, ye = max(0, dy), min(h, h + dy)
    xs, xe = max(0, dx), min(w, w + dx)
    out[:, ys:ye, xs:xe] = crop[:, ys - dy : ye - dy, xs - dx : xe - dx]
    out = out + rng.normal(0, 0.02, size=out.shape).astype(np.float32)
    return np.clip(out, -1.0, 1.0)


def train_image_encoder(
    crops: Sequence[np.ndarray],
    identities: Sequence,
    d: int = 128,
    steps: int = 800,
    batch_size: int = 24,
    lr: float = 2e-3,
    seed: int = 0,
    temperature: float = 0.2,
) -> SubjectImageEncoder:
    """Contrastive pretraining: jittered crops of the same sprite identity
    attract, crops of different identities repel (InfoNCE over the batch).

    When an identity has several bank crops the two views come from distinct
    crops, so the encoder also learns to ignore scene background bleed."""
    if len(crops) == 0:
        raise ValueError("no crops to pretrain on")
    by_identity: dict = {}
    for crop, identity in zip(crops, identities):
        key = identity.key() if identity is not None else ("anon", len(by_identity))
        by_identity.setdefault(key, []).append(crop)
    groups = list(by_identity.values())
    torch.manual_seed(seed)
    enc = SubjectImageEncoder(d=d)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    for _ in range(steps):
        idx = rng.choice(len(groups), size=min(batch_size, len(groups)), replace=False)
        views = []
        for g in idx:
            pool = groups[g]
            a = pool[int(rng.integers(len(pool)))]
            b = pool[int(rng.integers(len(pool)))]
            views.append(_augment_crop(a, rng))
            views.append(_augment_crop(b, rng))
        batch = torch.stack([enc.prepare(v)[0] for v in views])
        z = F.normalize(enc.embed_batch(batch), dim=1)
        sim = z @ z.t() / temperature
        sim.fill_diagonal_(float("-inf"))
        targets = torch.arange(len(views)) ^ 1  # partner view index
        pos = (z * z[targets]).sum(dim=1)
        # InfoNCE separates identities; the alignment term pins jittered
        # views of one identity tightly together
        loss = F.cross_entropy(sim, targets) + 12.0 * (1.0 - pos).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    enc.eval()
    return enc


# ---------------------------------------------------------------------------
# subject banks
# ---------------------------------------------------------------------------

def _crop_to_float(frame_u8: np.ndarray, box: Box) -> np.ndarray:
    crop = toyworld.crop_box(frame_u8, box).astype(np.float32) / 255.0 * 2.0 - 1.0
    return np.ascontiguousarray(crop.transpose(2, 0, 1))


def build_internal_bank(scenes: Sequence[ToyScene], min_area_px: int = 6) -> list[SubjectRecord]:
    """Harvest one reference crop per (scene, track) at its best keyframe.

    The keyframe maximizes the track's unoccluded pixel count (its own
    instance pixels when instance maps are available, box area otherwise);
    boxes below ``min_area_px`` are skipped without error.
    """
    records: list[SubjectRecord] = []
    for scene in scenes:
        H, W = scene.spec.resolution
        tracks: dict[int, tuple[float, int, Box, str]] = {}
        for t, frame_boxes in enumerate(scene.layout):
            for lb in frame_boxes:
                if not lb.visible or lb.box is None:
                    continue
                area = (lb.box.x_max - lb.box.x_min) * W * (lb.box.y_max - lb.box.y_min) * H
                if scene.instance_maps is not None:
                    score = float((scene.instance_maps[t] == lb.track_id + 1).sum())
                else:
                    score = area
                best = tracks.get(lb.track_id)
                if best is None or score > best[0]:
                    tracks[lb.track_id] = (score, t, lb.box, lb.category)
        for track_id, (score, t, box, category) in sorted(tracks.items()):
            if score < min_area_px:
                continue
            records.append(
                SubjectRecord(
                    track_id=track_id,
                    category=category,
                    reference_image=_crop_to_float(scene.frames_u8[t], box),
                    provenance="internal",
                    identity=scene.identities.get(track_id),
                    source=(scene.seed, t),
                )
            )
    return records


def build_external_bank(pad: int = 1) -> list[SubjectRecord]:
    """Render the reserved external identity pool into reference crops."""
    records = []
    road = np.array(toyworld._STYLE_COLORS["day"]["road"], dtype=np.uint8)
    for identity in toyworld.external_identities():
        rgb, mask = toyworld.render_sprite(identity)
        h, w = mask.shape
        canvas = np.tile(road, (h + 2 * pad, w + 2 * pad, 1))
        canvas[pad : pad + h, pad : pad + w][mask] = rgb[mask]
        crop = canvas.astype(np.float32) / 255.0 * 2.0 - 1.0
        records.append(
            SubjectRecord(
                track_id=-1,
                category=identity.category,
                reference_image=np.ascontiguousarray(crop.transpose(2, 0, 1)),
                provenance="external",
                identity=identity,
            )
        )
    return records


@dataclass(frozen=True)
class BankAssignment:
    record: SubjectRecord
    codebook_id: int


def sample_bank_subjects(
    bank: Sequence[SubjectRecord],
    layout,
    external_ratio: float,
    seed: int,
    codebook_size: int = 64,
) -> dict[int, BankAssignment]:
    """Assign one bank record to every track of a layout, fixed for the clip.

    A track draws from the external pool with probability ``external_ratio``
    (falling back to internal when no external record of its category
    exists). Internal assignments reuse the layout track id as codebook id;
    external assignments get fresh ids from the reserved upper half of the
    codebook. Deterministic given ``seed``.
    """
    if not 0.0 <= external_ratio <= 1.0:
        raise ValueError(f"external_ratio {external_ratio} outside [0, 1]")
    by_cat: dict[tuple[str, str], list[SubjectRecord]] = {}
    for rec in bank:
        by_cat.setdefault((rec.category, rec.provenance), []).append(rec)
    tracks: dict[int, str] = {}
    for frame_boxes in layout:
        for lb in frame_boxes:
            tracks.setdefault(lb.track_id, lb.category)
    rng = np.random.default_rng(seed)
    assignment: dict[int, BankAssignment] = {}
    next_external_slot = codebook_size // 2
    for track_id in sorted(tracks):
        category = tracks[track_id]
        internals = by_cat.get((category, "internal"), [])
        externals = by_cat.get((category, "external"), [])
        if not internals and not externals:
            raise ValueError(f"bank has no record for category {category!r}")
        use_external = bool(externals) and rng.random() < external_ratio
        pool = externals if use_external else (internals or externals)
        rec = pool[int(rng.integers(len(pool)))]
        if use_external:
            cb_id = min(next_external_slot, codebook_size - 1)
            next_external_slot += 1
        else:
            cb_id = track_id % codebook_size
        assignment[track_id] = BankAssignment(record=rec, codebook_id=cb_id)
    return assignment


def save_bank(bank: Sequence[SubjectRecord], out_dir: str) -> None:
    """Persist a bank as lossless crops plus a JSON-lines index."""
    os.makedirs(os.path.join(out_dir, "crops"), exist_ok=True)
    with open(os.path.join(out_dir, "bank.jsonl"), "w") as fh:
        for i, rec in enumerate(bank):
            fname = f"crops/{i:05d}.png"
            u8 = ((rec.reference_image.transpose(1, 2, 0) + 1.0) / 2.0 * 255.0).round().astype(np.uint8)
            Image.fromarray(u8).save(os.path.join(out_dir, fname))
            fh.write(
                json.dumps(
                    {
                        "id": i,
                        "track_id": rec.track_id,
                        "category": rec.category,
                        "provenance": rec.provenance,
                        "path": fname,
                        "identity": list(rec.identity.key()) if rec.identity else None,
                        "source": list(rec.source) if rec.source else None,
                    }
                )
                + "\n"
            )


def load_bank(bank_dir: str) -> list[SubjectRecord]:
    records = []
    with open(os.path.join(bank_dir, "bank.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            u8 = np.asarray(Image.open(os.path.join(bank_dir, rec["path"])))
            crop = (u8.astype(np.float32) / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)
            identity = rec.get("identity")
            records.append(
                SubjectRecord(
                    track_id=rec["track_id"],
                    category=rec["category"],
                    reference_image=np.ascontiguousarray(crop),
                    provenance=rec["provenance"],
                    identity=SpriteIdentity(identity[0], *map(int, identity[1:])) if identity else None,
                    source=tuple(rec["source"]) if rec.get("source") else None,
                )
            )
    return records
