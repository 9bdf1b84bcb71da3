"""Session fixtures for the heavier integration and acceptance tests.

Trained artifacts (codec, encoders, diffusion stages) are cached on disk
under tests/_cache keyed by CACHE_TAG: checkpoint containers round-trip
bit-exactly, so cached fixtures are equivalent to freshly trained ones.
Delete tests/_cache to force full retraining.
"""

import os

import numpy as np
import pytest
import torch

from spritediff import toyworld
from spritediff.checkpointing import load_checkpoint, save_checkpoint
from spritediff.probe import probe_samples_from_scenes, train_probe_detector
from spritediff.subjects import build_external_bank, build_internal_bank
from spritediff.training import TrainConfig, build_bundle, prepare_base, train

torch.set_num_threads(1)

CACHE_TAG = "v1"
CACHE_DIR = os.path.join(os.path.dirname(__file__), "_cache")

# pinned pilot configuration (see tests/pilot_records.json for measured results)
CORPUS_SCENES = 200
TRAIN_SPLIT = 160
OVERFIT_IMAGE_STEPS = 600
OVERFIT_VIDEO_STEPS = 900
TRAINED_IMAGE_STEPS = 1200
TRAINED_VIDEO_STEPS = 1400
TRAINED_SUBSET = 64


def _cached(name: str, builder):
    path = os.path.join(CACHE_DIR, f"{CACHE_TAG}_{name}.ckpt")
    if os.path.exists(path):
        return load_checkpoint(path)
    manifest = builder()
    os.makedirs(CACHE_DIR, exist_ok=True)
    save_checkpoint(manifest, path)
    return manifest


@pytest.fixture(scope="session")
def corpus():
    scenes = [toyworld.generate_scene(toyworld.make_scene_spec(s)) for s in range(CORPUS_SCENES)]
    return scenes[:TRAIN_SPLIT], scenes[TRAIN_SPLIT:]


@pytest.fixture(scope="session")
def base_manifest(corpus):
    train_scenes, _ = corpus
    return _cached("base", lambda: prepare_base(train_scenes, seed=0))


@pytest.fixture(scope="session")
def base_bundle(base_manifest):
    return build_bundle(base_manifest, seed=0)


@pytest.fixture(scope="session")
def internal_bank(corpus):
    return build_internal_bank(corpus[0])


@pytest.fixture(scope="session")
def mixed_bank(internal_bank):
    return internal_bank + build_external_bank()


@pytest.fixture(scope="session")
def probe_real(corpus):
    train_scenes, _ = corpus
    return train_probe_detector(probe_samples_from_scenes(train_scenes), seed=0, steps=600)


@pytest.fixture(scope="session")
def overfit_scene(corpus):
    return corpus[0][0]


@pytest.fixture(scope="session")
def overfit_manifest(base_manifest, overfit_scene):
    def build():
        img, _ = train(
            [overfit_scene],
            TrainConfig(stage="image", steps=OVERFIT_IMAGE_STEPS, batch_size=8, seed=0),
            base_manifest,
        )
        vid, _ = train(
            [overfit_scene],
            TrainConfig(stage="video", steps=OVERFIT_VIDEO_STEPS, batch_size=1, seed=0),
            img,
        )
        return vid

    return _cached("overfit", build)


@pytest.fixture(scope="session")
def trained_manifest(base_manifest, corpus):
    train_scenes, _ = corpus

    def build():
        subset = train_scenes[:TRAINED_SUBSET]
        img, _ = train(
            subset,
            TrainConfig(stage="image", steps=TRAINED_IMAGE_STEPS, batch_size=8, seed=0),
            base_manifest,
        )
        vid, _ = train(
            subset,
            TrainConfig(stage="video", steps=TRAINED_VIDEO_STEPS, batch_size=1, seed=0),
            img,
        )
        return vid

    return _cached("trained", build)


@pytest.fixture(scope="session")
def trained_bundle(trained_manifest):
    return build_bundle(trained_manifest)


@pytest.fixture(scope="session")
def overfit_bundle(overfit_manifest):
    return build_bundle(overfit_manifest)
