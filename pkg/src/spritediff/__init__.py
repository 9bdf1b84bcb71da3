"""spritediff: subject-controlled latent video diffusion on a sprite toy world."""

__version__ = "0.1.0"

from .diffusion import (  # noqa: F401
    NoiseSchedule,
    build_schedule,
    ddim_sample,
    denoising_loss,
    posterior_step,
    q_sample,
)
from .toyworld import (  # noqa: F401
    Box,
    LayoutBox,
    SceneSpec,
    SpriteIdentity,
    ToyScene,
    generate_scene,
    make_scene_spec,
    render_layout_condition,
    split_corpus,
)
