import numpy as np
import pytest
import torch

from spritediff import toyworld
from spritediff.conditioning import (
    SubjectConditioner,
    assemble_conditioning,
    bank_index_by_source,
    training_assignment,
)
from spritediff.subjects import build_internal_bank

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def scene():
    return toyworld.generate_scene(toyworld.SceneSpec(seed=21, num_subjects=3))


@pytest.fixture(scope="module")
def conditioner():
    torch.manual_seed(0)
    cond = SubjectConditioner(d=64)
    cond.eval()
    return cond


@pytest.fixture(scope="module")
def assignment(scene):
    bank = build_internal_bank([scene])
    return training_assignment(scene, bank_index_by_source(bank))


def test_bundle_shapes(scene, conditioner, assignment):
    with torch.no_grad():
        bundle = assemble_conditioning(
            scene.layout, scene.scene_prompt, assignment, conditioner,
            (32, 64), (8, 4, 8, 16),
        )
    assert bundle.fused_text.shape == (8, 32, 64)
    assert bundle.control_maps.shape == (8, 3, 32, 64)
    assert bundle.latent_shape == (8, 4, 8, 16)
    for t, toks in enumerate(bundle.subject_tokens):
        visible = sum(1 for lb in scene.layout[t] if lb.visible)
        if visible:
            assert toks.shape == (visible, 64)
        else:
            assert toks is None


def test_frame_subset(scene, conditioner, assignment):
    with torch.no_grad():
        bundle = assemble_conditioning(
            scene.layout, scene.scene_prompt, assignment, conditioner,
            (32, 64), (2, 4, 8, 16), frames=[0, 5],
        )
    assert bundle.fused_text.shape[0] == 2
    assert bundle.control_maps.shape[0] == 2
    maps_full = toyworld.render_layout_condition(scene.layout, (32, 64))
    assert np.array_equal(bundle.control_maps[1].numpy(), maps_full[5])


def test_text_dropout_uses_empty_prompt(scene, conditioner, assignment):
    with torch.no_grad():
        dropped = assemble_conditioning(
            scene.layout, scene.scene_prompt, assignment, conditioner,
            (32, 64), (8, 4, 8, 16), drop_text=True,
        )
        empty = conditioner.text_encoder([])
    for t in range(8):
        assert torch.equal(dropped.fused_text[t], empty)
        assert dropped.subject_tokens[t] is None


def test_layout_dropout_zeroes_maps(scene, conditioner, assignment):
    with torch.no_grad():
        dropped = assemble_conditioning(
            scene.layout, scene.scene_prompt, assignment, conditioner,
            (32, 64), (8, 4, 8, 16), drop_layout=True,
        )
    assert not dropped.control_maps.any()


def test_training_assignment_uses_own_records(scene, assignment):
    for track, a in assignment.items():
        assert a.codebook_id == track
        assert a.record.track_id == track
        assert a.record.source[0] == scene.seed
        assert a.record.category == scene.identities[track].category


def test_missing_record_raises(scene):
    with pytest.raises(KeyError):
        training_assignment(scene, {})
