"""Two-stage diffusion training and the model bundle.

Stage "image" trains on independently sampled single frames with the
temporal layers bypassed; stage "video" starts from an image-stage
checkpoint and trains on whole clips with the temporal layers active. The
codec is frozen throughout; its weight hash is recorded when training
starts and verified when it ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import codec as codecmod
from . import diffusion
from .checkpointing import CheckpointManifest, CheckpointError, pack_modules, unpack_into
from .codec import CodecConfig, FrameAutoencoder
from .conditioning import (
    SubjectConditioner,
    assemble_conditioning,
    bank_index_by_source,
    training_assignment,
)
from .denoiser import ControlBranch, DenoiserConfig, UNetDenoiser
from .subjects import build_internal_bank, train_image_encoder
from .toyworld import ToyScene


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "image"            # image | video
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    condition_dropout: float = 0.1

    def __post_init__(self):
        if self.stage not in ("image", "video"):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class ModelBundle:
    codec: FrameAutoencoder
    unet: UNetDenoiser
    control: ControlBranch
    conditioner: SubjectConditioner
    schedule: diffusion.NoiseSchedule
    schedule_config: dict
    latent_scale: float
    codec_hash: str
    model_config: dict

    def resolution(self, scene_like) -> tuple[int, int]:
        return tuple(scene_like.spec.resolution)

    def latent_shape(self, num_frames: int, resolution: tuple[int, int]) -> tuple[int, ...]:
        f = self.codec.cfg.downsample_factor
        return (num_frames, self.codec.cfg.latent_channels, resolution[0] // f, resolution[1] // f)

    def encode_scaled(self, frames: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return codecmod.encode(frames, self.codec) * self.latent_scale

    def decode_scaled(self, latents: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return codecmod.decode(latents / self.latent_scale, self.codec)

    def denoiser_fn(self, temporal: bool = True):
        """DDIM-compatible handle: (x_t, t, ConditioningBundle) -> eps."""

        def fn(x, t, cond):
            with torch.no_grad():
                control = None
                if cond.control_maps is not None:
                    control = self.control(cond.control_maps, t)
                return self.unet(
                    x, t, cond.fused_text, cond.subject_tokens, control, temporal=temporal
                )

        return fn

    def trainable_parameters(self):
        params = list(self.unet.parameters()) + list(self.control.parameters())
        params += [p for p in self.conditioner.parameters() if p.requires_grad]
        return params


DEFAULT_MODEL_CONFIG = {
    "downsample_factor": 4,
    "latent_channels": 4,
    "codec_base_channels": 24,
    "base_channels": 64,
    "channel_multipliers": [1, 2],
    "attention_levels": [0, 1],
    "text_dim": 128,
    "num_heads": 4,
    "gate_init": 0.0,
    "codebook_size": 64,
    "num_freqs": 8,
    "max_len": 32,
    "timesteps": 1000,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "schedule": "linear",
}


def denoiser_config(mc: dict) -> DenoiserConfig:
    return DenoiserConfig(
        in_channels=mc["latent_channels"],
        base_channels=mc["base_channels"],
        channel_multipliers=tuple(mc["channel_multipliers"]),
        attention_levels=tuple(mc["attention_levels"]),
        text_dim=mc["text_dim"],
        num_heads=mc["num_heads"],
        gate_init=mc["gate_init"],
        pixel_to_latent_factor=mc["downsample_factor"],
    )


def prepare_base(
    scenes: Sequence[ToyScene],
    model_config: Optional[dict] = None,
    codec_steps: int = 5000,
    encoder_steps: int = 800,
    seed: int = 0,
) -> CheckpointManifest:
    """Train the frozen codec and the contrastive image encoder; fit the
    latent scale. The resulting 'codec' manifest seeds stage-image training."""
    mc = dict(DEFAULT_MODEL_CONFIG)
    mc.update(model_config or {})
    frames = np.concatenate([s.pixel_video() for s in scenes], axis=0)
    cfg = CodecConfig(
        downsample_factor=mc["downsample_factor"],
        latent_channels=mc["latent_channels"],
        base_channels=mc["codec_base_channels"],
    )
    codec = codecmod.train_codec(frames, cfg, steps=codec_steps, seed=seed)
    scale = codecmod.latent_scale(codec, torch.as_tensor(frames))
    bank = build_internal_bank(scenes)
    encoder = train_image_encoder(
        [r.reference_image for r in bank], [r.identity for r in bank],
        d=mc["text_dim"], steps=encoder_steps, seed=seed,
    )
    manifest = CheckpointManifest(
        stage="codec",
        step=0,
        seed_lineage=[["codec", seed]],
        schedule={
            "num_steps": mc["timesteps"],
            "beta_start": mc["beta_start"],
            "beta_end": mc["beta_end"],
            "kind": mc["schedule"],
        },
        model_config=mc,
        latent_scale=scale,
        codec_hash=codecmod.weights_hash(codec),
        tensors=pack_modules({"codec": codec, "image_encoder": encoder}),
    )
    return manifest


def build_bundle(manifest: CheckpointManifest, seed: int = 0) -> ModelBundle:
    """Materialize modules from a manifest. Missing module blobs (e.g. when
    starting stage-image from a codec manifest) are freshly initialized from
    ``seed``."""
    mc = dict(DEFAULT_MODEL_CONFIG)
    mc.update(manifest.model_config)
    torch.manual_seed(seed)
    cfg = CodecConfig(
        downsample_factor=mc["downsample_factor"],
        latent_channels=mc["latent_channels"],
        base_channels=mc["codec_base_channels"],
    )
    codec = FrameAutoencoder(cfg)
    dcfg = denoiser_config(mc)
    unet = UNetDenoiser(dcfg)
    control = ControlBranch(dcfg)
    conditioner = SubjectConditioner(
        d=mc["text_dim"],
        max_len=mc["max_len"],
        codebook_size=mc["codebook_size"],
        num_freqs=mc["num_freqs"],
    )
    names = manifest.tensors.keys()
    unpack_into(manifest, "codec", codec)
    if any(n.startswith("unet.") for n in names):
        unpack_into(manifest, "unet", unet)
        unpack_into(manifest, "control", control)
        unpack_into(manifest, "conditioner", conditioner)
    elif any(n.startswith("image_encoder.") for n in names):
        unpack_into(manifest, "image_encoder", conditioner.image_encoder)
    codec.freeze()
    conditioner.freeze_image_trunk()
    schedule = diffusion.build_schedule(
        manifest.schedule.get("num_steps", mc["timesteps"]),
        manifest.schedule.get("beta_start", mc["beta_start"]),
        manifest.schedule.get("beta_end", mc["beta_end"]),
        manifest.schedule.get("kind", mc["schedule"]),
    )
    return ModelBundle(
        codec=codec,
        unet=unet,
        control=control,
        conditioner=conditioner,
        schedule=schedule,
        schedule_config=dict(manifest.schedule),
        latent_scale=manifest.latent_scale,
        codec_hash=manifest.codec_hash or codecmod.weights_hash(codec),
        model_config=mc,
    )


def bundle_manifest(
    bundle: ModelBundle, stage: str, step: int, seed_lineage: list
) -> CheckpointManifest:
    return CheckpointManifest(
        stage=stage,
        step=step,
        seed_lineage=seed_lineage,
        schedule=dict(bundle.schedule_config),
        model_config=dict(bundle.model_config),
        latent_scale=bundle.latent_scale,
        codec_hash=bundle.codec_hash,
        tensors=pack_modules(
            {
                "codec": bundle.codec,
                "unet": bundle.unet,
                "control": bundle.control,
                "conditioner": bundle.conditioner,
            }
        ),
    )


def train(
    corpus: Sequence[ToyScene],
    config: TrainConfig,
    init: CheckpointManifest,
) -> tuple[CheckpointManifest, list[tuple[int, float]]]:
    """Optimize the denoising loss over the corpus; returns (manifest, loss
    history). Stage "video" requires an image-stage init manifest."""
    if not corpus:
        raise ValueError("empty corpus")
    if config.stage == "video" and init.stage != "image":
        raise ValueError(f"stage=video requires a stage=image init, got {init.stage!r}")
    if config.stage == "image" and init.stage not in ("codec", "image"):
        raise ValueError(f"stage=image requires a codec (or image) init, got {init.stage!r}")

    bundle = build_bundle(init, seed=config.seed)
    frozen_hash = bundle.codec_hash
    schedule = bundle.schedule
    bank = build_internal_bank(corpus)
    bank_idx = bank_index_by_source(bank)

    latents: dict[int, torch.Tensor] = {}
    for scene in corpus:
        frames = torch.as_tensor(scene.pixel_video())
        latents[scene.seed] = bundle.encode_scaled(frames)

    params = bundle.trainable_parameters()
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    history: list[tuple[int, float]] = []

    for step in range(config.steps):
        if config.stage == "image":
            loss = _image_step(bundle, corpus, latents, bank_idx, config, schedule, rng, gen)
        else:
            loss = _video_step(bundle, corpus, latents, bank_idx, config, schedule, rng, gen)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss.item()} at step {step} "
                f"(stage={config.stage}, seed={config.seed}, lr={config.learning_rate})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step, float(loss.item())))

    if codecmod.weights_hash(bundle.codec) != frozen_hash:
        raise RuntimeError("frozen codec weights changed during diffusion training")

    lineage = list(init.seed_lineage) + [[config.stage, config.seed]]
    manifest = bundle_manifest(bundle, config.stage, init.step + config.steps, lineage)
    return manifest, history


def _image_step(bundle, corpus, latents, bank_idx, config, schedule, rng, gen):
    xs, ts, texts, toks, maps = [], [], [], [], []
    for _ in range(config.batch_size):
        scene = corpus[int(rng.integers(len(corpus)))]
        f = int(rng.integers(scene.spec.num_frames))
        assignment = training_assignment(scene, bank_idx)
        cond = assemble_conditioning(
            scene.layout,
            scene.scene_prompt,
            assignment,
            bundle.conditioner,
            tuple(scene.spec.resolution),
            bundle.latent_shape(1, tuple(scene.spec.resolution)),
            drop_text=rng.random() < config.condition_dropout,
            drop_layout=rng.random() < config.condition_dropout,
            frames=[f],
        )
        xs.append(latents[scene.seed][f])
        ts.append(int(rng.integers(1, schedule.num_steps + 1)))
        texts.append(cond.fused_text[0])
        toks.append(cond.subject_tokens[0])
        maps.append(cond.control_maps[0])
    x0 = torch.stack(xs)
    t = torch.as_tensor(ts)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = diffusion.q_sample(x0, t, eps, schedule)
    control = bundle.control(torch.stack(maps), t)
    pred = bundle.unet(x_t, t, torch.stack(texts), toks, control, temporal=False)
    return diffusion.denoising_loss(pred, eps)


def _video_step(bundle, corpus, latents, bank_idx, config, schedule, rng, gen):
    scene = corpus[int(rng.integers(len(corpus)))]
    assignment = training_assignment(scene, bank_idx)
    cond = assemble_conditioning(
        scene.layout,
        scene.scene_prompt,
        assignment,
        bundle.conditioner,
        tuple(scene.spec.resolution),
        bundle.latent_shape(scene.spec.num_frames, tuple(scene.spec.resolution)),
        drop_text=rng.random() < config.condition_dropout,
        drop_layout=rng.random() < config.condition_dropout,
    )
    x0 = latents[scene.seed]
    t = int(rng.integers(1, schedule.num_steps + 1))
    eps = torch.randn(x0.shape, generator=gen)
    x_t = diffusion.q_sample(x0, t, eps, schedule)
    control = bundle.control(cond.control_maps, t)
    pred = bundle.unet(x_t, t, cond.fused_text, cond.subject_tokens, control, temporal=True)
    return diffusion.denoising_loss(pred, eps)
