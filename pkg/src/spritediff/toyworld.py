"""Procedural toy driving scenes: moving sprites over parallax backgrounds.

Every scene is a pure function of its ``SceneSpec``. Annotations (boxes,
track ids, visibility) are exact by construction: the renderer places each
sprite at the rounded pixel position of the same analytic trajectory that
produces the normalized boxes, so a sprite's drawn mask always sits inside
its annotated box dilated by one pixel.

Sprite identities form a closed catalogue of (category, shape variant,
color, decal) tuples. Shape variants 0..2 of each category are the
"internal" pool (12 shapes x 8 colors x 4 decals = 384 identities); variant
3 is reserved for the disjoint "external" pool (4 shapes x 8 colors x 4
decals = 128 identities) and never appears in generated scenes.

On-disk corpus layout::

    scenes/<seed>/frame_000.png ...   lossless RGB frames
    scenes/<seed>/layout.jsonl        one frame per line
    scenes/<seed>/meta.json           prompt + spec echo + identities
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from PIL import Image

CATEGORIES = ("car", "bus", "truck", "pedestrian")
NUM_COLORS = 8
NUM_DECALS = 4
INTERNAL_VARIANTS = (0, 1, 2)
EXTERNAL_VARIANT = 3

PALETTE = np.array(
    [
        (200, 40, 40),    # red
        (50, 90, 200),    # blue
        (40, 160, 70),    # green
        (230, 200, 50),   # yellow
        (235, 235, 235),  # white
        (150, 60, 200),   # purple
        (235, 130, 40),   # orange
        (60, 200, 210),   # cyan
    ],
    dtype=np.uint8,
)

DARK = np.array((25, 25, 28), dtype=np.uint8)
WINDOW = np.array((205, 225, 240), dtype=np.uint8)
SKIN = np.array((230, 190, 160), dtype=np.uint8)

BACKGROUND_STYLES = ("day", "dusk", "night")
MOTION_MODELS = ("linear", "turning")

# closed word pools feeding scene prompts (the text vocabulary derives from these)
PROMPT_ADJECTIVES = {
    "day": ("sunny", "bright", "busy"),
    "dusk": ("dusk", "cloudy", "quiet"),
    "night": ("night", "dark", "empty"),
}
PROMPT_PLACES = ("street", "road", "avenue", "highway")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with coordinates normalized to [0, 1]."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"coordinate {v} outside [0, 1]")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)


@dataclass(frozen=True)
class LayoutBox:
    track_id: int
    category: str
    box: Optional[Box]
    visible: bool


# LayoutSequence: one list of LayoutBox per frame. Entries for tracks that
# left the frame carry box=None and visible=False; track_id stays stable.
LayoutSequence = list


@dataclass(frozen=True)
class SpriteIdentity:
    category: str
    variant: int
    color: int
    decal: int

    def key(self) -> tuple:
        return (self.category, self.variant, self.color, self.decal)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_frames: int = 8
    resolution: tuple[int, int] = (32, 64)  # (H, W)
    num_subjects: int = 2
    category_weights: tuple[float, ...] = (0.4, 0.2, 0.2, 0.2)
    background_style: str = "day"
    motion_model: str = "linear"

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.background_style not in BACKGROUND_STYLES:
            raise ValueError(f"unknown background_style {self.background_style!r}")
        if self.motion_model not in MOTION_MODELS:
            raise ValueError(f"unknown motion_model {self.motion_model!r}")


@dataclass
class ToyScene:
    spec: SceneSpec
    frames_u8: np.ndarray              # [T, H, W, 3] uint8
    layout: LayoutSequence             # [T][tracks] LayoutBox
    scene_prompt: str
    identities: dict                   # track_id -> SpriteIdentity
    instance_maps: Optional[np.ndarray] = None  # [T, H, W] int16, 0 = background

    @property
    def seed(self) -> int:
        return self.spec.seed

    def pixel_video(self) -> "np.ndarray":
        """Frames as float32 [T, 3, H, W] in [-1, 1]."""
        x = self.frames_u8.astype(np.float32) / 255.0 * 2.0 - 1.0
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# sprite catalogue
# ---------------------------------------------------------------------------

def _car_template(variant: int) -> np.ndarray:
    # category signature: 10x6, raised cabin with window, body margins on
    # both sides of the cabin, two wheels
    t = np.zeros((6, 10), dtype=np.uint8)
    t[2:6, 0:10] = 1
    if variant == 0:
        t[0:2, 2:7] = 1
        t[1, 3:6] = 3
    elif variant == 1:
        t[0:2, 3:8] = 1
        t[1, 4:7] = 3
        t[3, 0:2] = 3  # headlight block
    elif variant == 2:
        t[0:2, 2:8] = 1
        t[1, 3:7:2] = 3
        t[4, 0] = 2
        t[4, 9] = 2  # bumper marks
    else:
        t[0:2, 3:7] = 1  # external: низкий coupe, slim window
        t[1, 4:6] = 3
        t[2, 9] = 2
    t[5, 1:3] = 2
    t[5, 7:9] = 2
    return t


def _bus_template(variant: int) -> np.ndarray:
    # category signature: 16x8 full-height slab with a window row near the top
    t = np.zeros((8, 16), dtype=np.uint8)
    t[0:8, 0:16] = 1
    t[1:3, 1:15:2] = 3  # window row on every bus
    if variant == 1:
        t[4:7, 14:16] = 2  # rear door
    elif variant == 2:
        t[4:6, 1:15:4] = 3  # lower deck windows
    elif variant == 3:
        t[0:8, 8] = 2  # external: articulation joint
    t[7, 2:4] = 2
    t[7, 12:14] = 2
    return t


def _truck_template(variant: int) -> np.ndarray:
    # category signature: 14x7, low cab with window, dark separator column,
    # tall boxy trailer
    t = np.zeros((7, 14), dtype=np.uint8)
    t[2:7, 0:4] = 1
    t[2, 2:4] = 3
    t[2:7, 4] = 2  # cab/trailer separator
    if variant == 0:
        t[0:7, 5:14] = 1
    elif variant == 1:
        t[0:7, 5:14] = 1
        t[1, 6:13:2] = 2  # ribbed roof
    elif variant == 2:
        t[0:7, 5:14] = 1
        t[1:6, 9] = 2  # tank band
    else:
        t[0:7, 5:14] = 1  # external: container with door seam
        t[1:6, 12] = 2
    t[6, 1:3] = 2
    t[6, 10:12] = 2
    return t


def _pedestrian_template(variant: int) -> np.ndarray:
    t = np.zeros((9, 5), dtype=np.uint8)
    t[0:2, 1:4] = 4  # head (skin)
    if variant == 0:
        t[2:7, 1:4] = 1
    elif variant == 1:
        t[2:7, 0:5] = 1  # broad coat with dark trim
        t[2, 0] = 2
        t[2, 4] = 2
    elif variant == 2:
        t[0, 0:5] = 2  # hat brim
        t[1, 1:4] = 2
        t[2:7, 1:4] = 1
    else:
        t[2:6, 1:4] = 1  # short figure carrying a dark bag
        t[4:6, 0] = 2
        t = t[:8]
    t[-2:, 1] = 2
    t[-2:, 3] = 2
    return t


_TEMPLATE_FNS = {
    "car": _car_template,
    "bus": _bus_template,
    "truck": _truck_template,
    "pedestrian": _pedestrian_template,
}


def render_sprite(identity: SpriteIdentity) -> tuple[np.ndarray, np.ndarray]:
    """Render one sprite; returns (rgb uint8 [h, w, 3], mask bool [h, w]).

    Part codes in the template: 1 body, 2 dark, 3 window, 4 skin. The decal
    is painted in a contrasting palette color over the body region.
    """
    t = _TEMPLATE_FNS[identity.category](identity.variant)
    h, w = t.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    mask = t > 0
    rgb[t == 1] = PALETTE[identity.color]
    rgb[t == 2] = DARK
    rgb[t == 3] = WINDOW
    rgb[t == 4] = SKIN
    decal_color = PALETTE[(identity.color + 4) % NUM_COLORS]
    body = t == 1
    if identity.decal == 1:  # roof stripe, two rows
        rows = np.nonzero(body.any(axis=1))[0][:2]
        for row in rows:
            rgb[row, body[row]] = decal_color
    elif identity.decal == 2:  # centered block
        ys, xs = np.nonzero(body)
        cy, cx = int(ys.mean()) - 1, int(xs.mean()) - 1
        sel = body[max(0, cy) : cy + 3, max(0, cx) : cx + 3]
        rgb[max(0, cy) : cy + 3, max(0, cx) : cx + 3][sel] = decal_color
    elif identity.decal == 3:  # tail stripe, two columns
        cols = np.nonzero(body.any(axis=0))[0][-2:]
        for col in cols:
            rgb[body[:, col], col] = decal_color
    return rgb, mask


def internal_identities() -> list[SpriteIdentity]:
    return [
        SpriteIdentity(cat, v, c, d)
        for cat in CATEGORIES
        for v in INTERNAL_VARIANTS
        for c in range(NUM_COLORS)
        for d in range(NUM_DECALS)
    ]


def external_identities() -> list[SpriteIdentity]:
    return [
        SpriteIdentity(cat, EXTERNAL_VARIANT, c, d)
        for cat in CATEGORIES
        for c in range(NUM_COLORS)
        for d in range(NUM_DECALS)
    ]


# ---------------------------------------------------------------------------
# backgrounds
# ---------------------------------------------------------------------------

_STYLE_COLORS = {
    "day": {"sky": (135, 190, 235), "band": (90, 110, 125), "road": (70, 72, 76), "dash": (220, 220, 200)},
    "dusk": {"sky": (210, 140, 90), "band": (70, 70, 95), "road": (60, 60, 66), "dash": (200, 190, 170)},
    "night": {"sky": (20, 24, 48), "band": (35, 35, 52), "road": (38, 38, 44), "dash": (160, 160, 150)},
}


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-frame backgrounds [T, H, W, 3] with parallax scrolling bands."""
    H, W = spec.resolution
    colors = _STYLE_COLORS[spec.background_style]
    sky_h = max(2, H * 11 // 32)
    band_h = max(2, H * 8 // 32)
    road_top = sky_h + band_h

    # periodic skyline strip, width W so shifting wraps cleanly
    heights = rng.integers(1, band_h + 1, size=max(2, W // 6))
    skyline = np.zeros((band_h, W), dtype=bool)
    block_w = W // len(heights)
    for i, bh in enumerate(heights):
        skyline[band_h - int(bh) :, i * block_w : (i + 1) * block_w] = True

    pan = float(rng.uniform(-1.5, 1.5))
    frames = np.zeros((spec.num_frames, H, W, 3), dtype=np.uint8)
    dash_period = 8
    for t in range(spec.num_frames):
        f = frames[t]
        f[:sky_h] = colors["sky"]
        band = np.roll(skyline, round(0.5 * pan * t), axis=1)
        f[sky_h:road_top] = colors["sky"]
        f[sky_h:road_top][band] = colors["band"]
        f[road_top:] = colors["road"]
        dash_row = min(H - 2, road_top + (H - road_top) // 2)
        offset = round(pan * t) % dash_period
        for x0 in range(-dash_period, W + dash_period, dash_period):
            x = x0 + offset
            f[dash_row, max(0, x) : min(W, x + 4)] = colors["dash"]
    return frames


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _trajectory(p0: np.ndarray, v0: np.ndarray, model: str, turn_rate: float, t: int) -> np.ndarray:
    """Top-left pixel position at frame t (closed form, floats)."""
    if model == "linear" or t == 0:
        return p0 + v0 * t
    steps = np.arange(t)
    ang = turn_rate * steps
    dx = np.cos(ang) * v0[0] - np.sin(ang) * v0[1]
    dy = np.sin(ang) * v0[0] + np.cos(ang) * v0[1]
    return p0 + np.array([dx.sum(), dy.sum()])


def make_scene_spec(
    seed: int,
    num_frames: int = 8,
    resolution: tuple[int, int] = (32, 64),
    min_subjects: int = 1,
    max_subjects: int = 4,
) -> SceneSpec:
    """Randomize the free spec fields (style, motion, subject count) from seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE2E]))
    return SceneSpec(
        seed=seed,
        num_frames=num_frames,
        resolution=resolution,
        num_subjects=int(rng.integers(min_subjects, max_subjects + 1)),
        background_style=str(rng.choice(BACKGROUND_STYLES)),
        motion_model=str(rng.choice(MOTION_MODELS)),
    )


def generate_scene(spec: SceneSpec) -> ToyScene:
    """Deterministically render a scene and its exact annotations."""
    H, W = spec.resolution
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    frames = _render_background(spec, rng)
    T = spec.num_frames

    adjectives = PROMPT_ADJECTIVES[spec.background_style]
    prompt = f"{rng.choice(adjectives)} {rng.choice(PROMPT_PLACES)}"

    pool = internal_identities()
    weights = np.asarray(spec.category_weights, dtype=np.float64)
    weights = weights / weights.sum()

    # lane-structured traffic: pedestrians walk the sidewalk band, vehicles
    # keep to one of two lanes (far lane heads left, near lane right), which
    # keeps occlusion rare and tracking well-posed
    road_top = max(2, H * 19 // 32)
    road_h = H - road_top
    # (lane bottom row, speed range, fixed direction); sprites sit on bottoms
    lanes = {
        "sidewalk": (road_top - 1, 0.25, 0.9, None),
        "far": (road_top + road_h // 2 - 1, 0.4, 2.2, -1.0),
        "near": (H - 1, 0.4, 2.2, 1.0),
    }
    sprites = []  # (track, identity, rgb, mask, p0, v0, turn_rate)
    occupancy: dict[str, list[tuple[float, float, float]]] = {k: [] for k in lanes}
    for track in range(spec.num_subjects):
        category = str(rng.choice(CATEGORIES, p=weights))
        candidates = [i for i in pool if i.category == category]
        identity = candidates[int(rng.integers(len(candidates)))]
        rgb, mask = render_sprite(identity)
        h, w = mask.shape
        if category == "pedestrian":
            lane_name = "sidewalk"
        else:
            lane_name = "far" if rng.random() < 0.5 else "near"
        bottom, v_lo, v_hi, direction = lanes[lane_name]
        y0 = float(bottom + 1 - h) + float(rng.uniform(-1.0, 0.5))
        y0 = min(max(0.0, y0), float(H - h))
        speed = float(rng.uniform(v_lo, v_hi))
        vx = speed * (direction if direction is not None else (1 if rng.random() < 0.5 else -1))
        placed = False
        for _attempt in range(30):
            x0 = float(rng.uniform(0, W - w - 1))
            # same-lane spacing accounts for relative speed over the clip
            ok = True
            for ox, ow, ovx in occupancy[lane_name]:
                margin = 3.0 + abs(vx - ovx) * spec.num_frames
                if x0 < ox + ow + margin and ox < x0 + w + margin:
                    ok = False
                    break
            if ok:
                placed = True
                break
        if not placed:
            continue
        occupancy[lane_name].append((x0, w, vx))
        vy = 0.0
        turn_rate = float(rng.uniform(-0.12, 0.12)) if spec.motion_model == "turning" else 0.0
        sprites.append((track, identity, rgb, mask, np.array([x0, y0]), np.array([vx, vy]), turn_rate))
    sprites = [(i, *rest) for i, (_, *rest) in enumerate(sprites)]

    layout: LayoutSequence = []
    instance_maps = np.zeros((T, H, W), dtype=np.int16)
    identities = {}
    for track, identity, *_ in sprites:
        identities[track] = identity

    for t in range(T):
        frame_boxes: list[LayoutBox] = []
        for track, identity, rgb, mask, p0, v0, turn_rate in sprites:
            h, w = mask.shape
            pos = _trajectory(p0, v0, spec.motion_model, turn_rate, t)
            x, y = float(pos[0]), float(pos[1])
            cx0 = min(max(x / W, 0.0), 1.0)
            cy0 = min(max(y / H, 0.0), 1.0)
            cx1 = min(max((x + w) / W, 0.0), 1.0)
            cy1 = min(max((y + h) / H, 0.0), 1.0)
            visible = cx1 > cx0 and cy1 > cy0
            box = Box(cx0, cy0, cx1, cy1) if visible else None
            frame_boxes.append(LayoutBox(track, identity.category, box, visible))
            if visible:
                _blit(frames[t], instance_maps[t], rgb, mask, round(x), round(y), track + 1)
        layout.append(frame_boxes)

    return ToyScene(
        spec=spec,
        frames_u8=frames,
        layout=layout,
        scene_prompt=prompt,
        identities=identities,
        instance_maps=instance_maps,
    )


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _blit(frame: np.ndarray, imap: np.ndarray, rgb: np.ndarray, mask: np.ndarray, x: int, y: int, inst: int) -> None:
    H, W = frame.shape[:2]
    h, w = mask.shape
    sy, sx = max(0, -y), max(0, -x)
    ey, ex = min(h, H - y), min(w, W - x)
    if sy >= ey or sx >= ex:
        return
    sub = mask[sy:ey, sx:ex]
    frame[y + sy : y + ey, x + sx : x + ex][sub] = rgb[sy:ey, sx:ex][sub]
    imap[y + sy : y + ey, x + sx : x + ex][sub] = inst


# ---------------------------------------------------------------------------
# layout rasterization (conditioning maps)
# ---------------------------------------------------------------------------

def default_palette() -> dict:
    return {cat: (i + 1) / len(CATEGORIES) for i, cat in enumerate(CATEGORIES)}


def track_brightness(track_id: int) -> float:
    """Border brightness in [0.25, 1.0], stable hash of the track id."""
    return ((track_id * 2654435761) % 97) / 96 * 0.75 + 0.25


def render_layout_condition(
    layout: LayoutSequence,
    resolution: tuple[int, int],
    palette: Optional[dict] = None,
) -> np.ndarray:
    """Rasterize a layout into float32 condition maps [T, 3, H, W] in [0, 1].

    Channels: 0 = filled box in category color, 1 = one-pixel border with
    track-id-hash brightness, 2 = visibility fill. Boxes are drawn in list
    order; a later box fully repaints its region (painter's order). Pixel
    extents are the rounded box edges, widened to one pixel if rounding
    collapses a visible box.
    """
    palette = palette or default_palette()
    H, W = resolution
    T = len(layout)
    maps = np.zeros((T, 3, H, W), dtype=np.float32)
    for t, frame_boxes in enumerate(layout):
        for lb in frame_boxes:
            if not lb.visible or lb.box is None:
                continue
            if lb.category not in palette:
                raise ValueError(f"category {lb.category!r} missing from palette")
            r0, r1 = round(lb.box.y_min * H), round(lb.box.y_max * H)
            c0, c1 = round(lb.box.x_min * W), round(lb.box.x_max * W)
            r0, c0 = max(0, r0), max(0, c0)
            r1, c1 = min(H, max(r1, r0 + 1)), min(W, max(c1, c0 + 1))
            if r0 >= H or c0 >= W:
                continue
            maps[t, 0, r0:r1, c0:c1] = palette[lb.category]
            maps[t, 1, r0:r1, c0:c1] = 0.0
            b = track_brightness(lb.track_id)
            maps[t, 1, r0, c0:c1] = b
            maps[t, 1, r1 - 1, c0:c1] = b
            maps[t, 1, r0:r1, c0] = b
            maps[t, 1, r0:r1, c1 - 1] = b
            maps[t, 2, r0:r1, c0:c1] = 1.0
    return maps


# ---------------------------------------------------------------------------
# corpus management
# ---------------------------------------------------------------------------

def split_corpus(scenes: Sequence, ratios: tuple[float, float]) -> tuple[list, list]:
    """Deterministic disjoint train/val split ordered by scene seed."""
    if not scenes:
        raise ValueError("empty corpus")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    ordered = sorted(scenes, key=lambda s: s.seed)
    n_train = round(ratios[0] * len(ordered))
    return list(ordered[:n_train]), list(ordered[n_train:])


def save_scene(scene: ToyScene, scene_dir: str) -> None:
    os.makedirs(scene_dir, exist_ok=True)
    for i in range(scene.frames_u8.shape[0]):
        Image.fromarray(scene.frames_u8[i]).save(os.path.join(scene_dir, f"frame_{i:03d}.png"))
    with open(os.path.join(scene_dir, "layout.jsonl"), "w") as fh:
        for i, frame_boxes in enumerate(scene.layout):
            boxes = [
                [lb.track_id, lb.category]
                + (list(lb.box.as_tuple()) if lb.box is not None else [0.0, 0.0, 0.0, 0.0])
                + [lb.visible]
                for lb in frame_boxes
            ]
            fh.write(json.dumps({"frame": i, "boxes": boxes}) + "\n")
    meta = {
        "prompt": scene.scene_prompt,
        "spec": asdict(scene.spec),
        "identities": {str(k): list(v.key()) for k, v in scene.identities.items()},
    }
    with open(os.path.join(scene_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_scene(scene_dir: str) -> ToyScene:
    with open(os.path.join(scene_dir, "meta.json")) as fh:
        meta = json.load(fh)
    spec_d = meta["spec"]
    spec_d["resolution"] = tuple(spec_d["resolution"])
    spec_d["category_weights"] = tuple(spec_d["category_weights"])
    spec = SceneSpec(**spec_d)
    frames = []
    for i in range(spec.num_frames):
        frames.append(np.asarray(Image.open(os.path.join(scene_dir, f"frame_{i:03d}.png"))))
    layout: LayoutSequence = []
    with open(os.path.join(scene_dir, "layout.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            frame_boxes = []
            for track, cat, x0, y0, x1, y1, vis in rec["boxes"]:
                box = Box(x0, y0, x1, y1) if vis else None
                frame_boxes.append(LayoutBox(int(track), cat, box, bool(vis)))
            layout.append(frame_boxes)
    identities = {
        int(k): SpriteIdentity(v[0], int(v[1]), int(v[2]), int(v[3]))
        for k, v in meta["identities"].items()
    }
    return ToyScene(
        spec=spec,
        frames_u8=np.stack(frames),
        layout=layout,
        scene_prompt=meta["prompt"],
        identities=identities,
    )


def generate_corpus(
    out_dir: str,
    num_scenes: int,
    base_seed: int = 0,
    num_frames: int = 8,
    resolution: tuple[int, int] = (32, 64),
    min_subjects: int = 1,
    max_subjects: int = 4,
    val_fraction: float = 0.2,
) -> dict:
    """Generate and persist a corpus; returns the written index."""
    seeds = [base_seed + i for i in range(num_scenes)]
    for seed in seeds:
        spec = make_scene_spec(seed, num_frames, resolution, min_subjects, max_subjects)
        scene = generate_scene(spec)
        save_scene(scene, os.path.join(out_dir, "scenes", str(seed)))
    n_train = round((1.0 - val_fraction) * num_scenes)
    index = {
        "seeds": seeds,
        "train_seeds": seeds[:n_train],
        "val_seeds": seeds[n_train:],
        "num_frames": num_frames,
        "resolution": list(resolution),
    }
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return index


def load_corpus(corpus_dir: str) -> tuple[list[ToyScene], list[ToyScene]]:
    """Load (train, val) scenes per the corpus index."""
    with open(os.path.join(corpus_dir, "index.json")) as fh:
        index = json.load(fh)
    train = [load_scene(os.path.join(corpus_dir, "scenes", str(s))) for s in index["train_seeds"]]
    val = [load_scene(os.path.join(corpus_dir, "scenes", str(s))) for s in index["val_seeds"]]
    return train, val


def crop_box(frame_u8: np.ndarray, box: Box) -> np.ndarray:
    """Extract the rounded pixel region of a normalized box from one frame."""
    H, W = frame_u8.shape[:2]
    r0, r1 = round(box.y_min * H), round(box.y_max * H)
    c0, c1 = round(box.x_min * W), round(box.x_max * W)
    r0, c0 = max(0, r0), max(0, c0)
    r1, c1 = min(H, max(r1, r0 + 1)), min(W, max(c1, c0 + 1))
    return frame_u8[r0:r1, c0:c1]
