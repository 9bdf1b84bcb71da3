import numpy as np
import pytest
import torch

from spritediff import toyworld
from spritediff.checkpointing import CheckpointManifest
from spritediff.codec import weights_hash
from spritediff.training import (
    DEFAULT_MODEL_CONFIG,
    ModelBundle,
    TrainConfig,
    build_bundle,
    bundle_manifest,
    prepare_base,
    train,
)

torch.set_num_threads(1)

TINY_MODEL = {
    "base_channels": 32,
    "codec_base_channels": 8,
    "text_dim": 64,
    "timesteps": 50,
}


@pytest.fixture(scope="module")
def tiny_scenes():
    return [toyworld.generate_scene(toyworld.make_scene_spec(s)) for s in range(3)]


@pytest.fixture(scope="module")
def tiny_base(tiny_scenes):
    return prepare_base(tiny_scenes, model_config=TINY_MODEL, codec_steps=30, encoder_steps=30, seed=0)


class TestTrainConfig:
    def test_stage_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(stage="audio")


class TestStageGating:
    def test_video_requires_image_init(self, tiny_scenes, tiny_base):
        with pytest.raises(ValueError, match="stage=image init"):
            train(tiny_scenes, TrainConfig(stage="video", steps=1, seed=0), tiny_base)

    def test_image_requires_codec_init(self, tiny_scenes):
        bogus = CheckpointManifest(stage="video")
        with pytest.raises(ValueError, match="codec"):
            train(tiny_scenes, TrainConfig(stage="image", steps=1, seed=0), bogus)

    def test_empty_corpus_rejected(self, tiny_base):
        with pytest.raises(ValueError, match="empty"):
            train([], TrainConfig(stage="image", steps=1, seed=0), tiny_base)


class TestTrainMechanics:
    def test_zero_steps_returns_init_weights(self, tiny_scenes, tiny_base):
        manifest, history = train(
            tiny_scenes, TrainConfig(stage="image", steps=0, seed=5), tiny_base
        )
        assert history == []
        want = bundle_manifest(build_bundle(tiny_base, seed=5), "image", 0, [])
        assert set(manifest.tensors) == set(want.tensors)
        for name in manifest.tensors:
            assert torch.equal(manifest.tensors[name], want.tensors[name]), name

    def test_deterministic_given_seed(self, tiny_scenes, tiny_base):
        cfg = TrainConfig(stage="image", steps=10, batch_size=2, seed=3)
        m1, h1 = train(tiny_scenes, cfg, tiny_base)
        m2, h2 = train(tiny_scenes, cfg, tiny_base)
        assert round(h1[-1][1], 6) == round(h2[-1][1], 6)
        for name in m1.tensors:
            assert torch.equal(m1.tensors[name], m2.tensors[name]), name

    def test_loss_decreases_under_overfit(self, tiny_scenes, tiny_base):
        cfg = TrainConfig(
            stage="image", steps=220, batch_size=8, seed=0, learning_rate=4e-4,
            condition_dropout=0.0,
        )
        _, history = train([tiny_scenes[0]], cfg, tiny_base)
        first = np.mean([l for _, l in history[:12]])
        last = np.mean([l for _, l in history[-12:]])
        assert last < 0.5 * first

    def test_video_stage_resumes_from_image(self, tiny_scenes, tiny_base):
        img, _ = train(tiny_scenes, TrainConfig(stage="image", steps=4, seed=0), tiny_base)
        assert img.stage == "image"
        vid, hist = train(tiny_scenes, TrainConfig(stage="video", steps=3, seed=0), img)
        assert vid.stage == "video"
        assert vid.step == img.step + 3
        assert vid.seed_lineage[-1] == ["video", 0]
        assert len(hist) == 3

    def test_codec_hash_recorded_and_frozen(self, tiny_scenes, tiny_base):
        manifest, _ = train(tiny_scenes, TrainConfig(stage="image", steps=3, seed=0), tiny_base)
        assert manifest.codec_hash == tiny_base.codec_hash
        bundle = build_bundle(manifest)
        assert weights_hash(bundle.codec) == manifest.codec_hash

    def test_nan_loss_aborts_with_diagnostic(self, tiny_scenes, tiny_base, monkeypatch):
        from spritediff import training as trainmod

        def poisoned(*args, **kwargs):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(trainmod, "_image_step", lambda *a: poisoned())
        with pytest.raises(RuntimeError, match="non-finite"):
            train(tiny_scenes, TrainConfig(stage="image", steps=1, seed=0), tiny_base)


class TestBundle:
    def test_latent_shape(self, tiny_base):
        bundle = build_bundle(tiny_base)
        assert bundle.latent_shape(8, (32, 64)) == (8, 4, 8, 16)

    def test_scaled_codec_round_trip(self, tiny_base, tiny_scenes):
        bundle = build_bundle(tiny_base)
        frames = torch.as_tensor(tiny_scenes[0].pixel_video())
        z = bundle.encode_scaled(frames)
        x = bundle.decode_scaled(z)
        assert x.shape == frames.shape

    def test_build_bundle_restores_trained_weights(self, tiny_scenes, tiny_base):
        manifest, _ = train(tiny_scenes, TrainConfig(stage="image", steps=2, seed=1), tiny_base)
        bundle = build_bundle(manifest)
        repacked = bundle_manifest(bundle, "image", manifest.step, manifest.seed_lineage)
        for name in manifest.tensors:
            assert torch.equal(repacked.tensors[name], manifest.tensors[name]), name
