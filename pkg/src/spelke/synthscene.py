"""Desk-scale synthetic scenes: colored shapes on a textured rug, one pushed.

Colors are drawn from a fixed palette of hue directions at a common
brightness, jittered per scene. The "distinct" palette holds the six
primary/secondary hues; "full" adds six in-between hues whose neighbors are
close in color. In agent mode a two-rectangle "arm" enters
from the top edge; in contact scenes it touches one object and both move by
the same integer displacement, otherwise the arm moves alone.

Rendering uses integer displacements so flow and the second frame are exact.
Later-drawn shapes occlude earlier ones; segments are the visible pixels of
the first frame.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .seeding import derive_seed

SHAPES = ("rectangle", "ellipse", "lshape")
TEXTURES = ("flat", "noise")
COLOR_NORM = 0.8

_PALETTE_DIRS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.45, 0.0],
        [0.45, 1.0, 0.0],
        [0.0, 0.45, 1.0],
        [1.0, 0.0, 0.45],
        [0.45, 0.0, 1.0],
        [0.0, 1.0, 0.45],
    ]
)
PALETTE = COLOR_NORM * _PALETTE_DIRS / np.linalg.norm(_PALETTE_DIRS, axis=1, keepdims=True)
PALETTES = {"distinct": PALETTE[:6], "full": PALETTE}
AGENT_COLOR = COLOR_NORM * np.ones(3) / np.sqrt(3.0)


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 5
    shapes: tuple = SHAPES
    agent_mode: bool = False
    texture: str = "noise"
    seed: int = 0
    min_size: int = 14
    max_size: int = 26
    agent_alone_fraction: float = 0.4
    color_jitter: float = 0.03
    max_retries: int = 200
    palette: str = "distinct"

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 1 <= min_size <= max_size <= image_size")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.palette not in PALETTES:
            raise ValueError(f"palette must be one of {tuple(PALETTES)}")
        if self.max_objects + 1 > len(PALETTES[self.palette]):
            raise ValueError(
                f"palette {self.palette!r} has room for at most "
                f"{len(PALETTES[self.palette]) - 1} objects"
            )
        self.shapes = tuple(self.shapes)
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")


@dataclass
class Scene:
    frame0: np.ndarray
    frame1: np.ndarray
    flow: np.ndarray
    segments: np.ndarray
    moved_label: int
    agent_label: int = None
    moving_labels: tuple = ()
    num_objects: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def agent_contact(self):
        return self.agent_label is not None and self.moved_label != self.agent_label


def _shape_mask(kind, h, w, rng):
    mask = np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    elif kind == "lshape":
        ch, cw = h // 2, w // 2
        corner = rng.integers(4)
        rs = slice(0, ch) if corner < 2 else slice(h - ch, h)
        cs = slice(0, cw) if corner % 2 == 0 else slice(w - cw, w)
        mask[rs, cs] = False
    return mask


def _paste(canvas_mask, shape_mask, top, left):
    """Place *shape_mask* at (top, left), clipping to the canvas."""
    H, W = canvas_mask.shape
    h, w = shape_mask.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + h, H), min(left + w, W)
    if r0 < r1 and c0 < c1:
        canvas_mask[r0:r1, c0:c1] |= shape_mask[r0 - top : r1 - top, c0 - left : c1 - left]
    return canvas_mask


def _pick_colors(rng, n, jitter, palette=PALETTE):
    idx = rng.choice(len(palette), size=n, replace=False)
    colors = palette[idx] + rng.normal(0.0, jitter, size=(n, 3))
    return np.clip(colors, 0.0, 1.0), idx


def _rug(rng, size, color, texture):
    img = np.broadcast_to(color, (size, size, 3)).copy()
    if texture == "noise":
        coarse = rng.uniform(-1.0, 1.0, size=(size // 8 + 1, size // 8 + 1))
        smooth = ndimage.zoom(coarse, size / coarse.shape[0], order=1)[:size, :size]
        img *= (1.0 + 0.08 * smooth)[..., None]
        img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _displacement(rng):
    while True:
        d = rng.integers(-8, 9, size=2)
        if 2.0 <= np.hypot(*d) <= 8.0:
            return int(d[0]), int(d[1])


def _render(size, background, items, offsets):
    """Draw *items* (mask, top, left, color) in order; returns image and label map."""
    img = background.copy()
    labels = np.zeros((size, size), dtype=np.int32)
    for lab, (mask, top, left, color) in enumerate(items, start=1):
        dy, dx = offsets.get(lab, (0, 0))
        canvas = _paste(np.zeros((size, size), dtype=bool), mask, top + dy, left + dx)
        img[canvas] = color
        labels[canvas] = lab
    return img, labels


def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _arm_mask(size, grip_top, grip_left, grip_w, grip_h, bar_w):
    """Bar from the top edge down to a gripper whose top-left is given."""
    mask = np.zeros((size, size), dtype=bool)
    mask[grip_top : grip_top + grip_h, grip_left : grip_left + grip_w] = True
    bar_left = grip_left + (grip_w - bar_w) // 2
    mask[0:grip_top, bar_left : bar_left + bar_w] = True
    return mask


def _try_scene(cfg, rng, mover_slot, contact):
    size = cfg.image_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    n_colors = n + 1
    colors, _ = _pick_colors(rng, n_colors, cfg.color_jitter, PALETTES[cfg.palette])
    rug_color, obj_colors = colors[0], colors[1:]
    background = _rug(rng, size, rug_color, cfg.texture)

    items = []
    for k in range(n):
        h, w = rng.integers(cfg.min_size, cfg.max_size + 1, size=2)
        kind = cfg.shapes[rng.integers(len(cfg.shapes))]
        mask = _shape_mask(kind, int(h), int(w), rng)
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        items.append((mask, top, left, obj_colors[k]))

    _, labels = _render(size, background, items, {})
    for k, (mask, _, _, _) in enumerate(items, start=1):
        visible = (labels == k).sum()
        if visible < 0.6 * mask.sum() or visible < 64:
            return None

    mover = mover_slot % n + 1
    d = _displacement(rng)
    mask, top, left, _ = items[mover - 1]
    mh, mw = mask.shape
    if not (0 <= top + d[0] and top + d[0] + mh <= size and 0 <= left + d[1] and left + d[1] + mw <= size):
        return None

    agent_label = None
    moving = [mover]
    if cfg.agent_mode:
        agent_label = n + 1
        grip_w, grip_h, bar_w = int(rng.integers(12, 17)), 8, 8
        if contact:
            obj = labels == mover
            rows = np.nonzero(obj.any(axis=1))[0]
            top_row = int(rows[0])
            cols = np.nonzero(obj[top_row])[0]
            centre = int(cols[len(cols) // 2])
            grip_top = top_row - grip_h
            grip_left = centre - grip_w // 2
        else:
            grip_top = int(rng.integers(6, size - grip_h - 4))
            grip_left = int(rng.integers(0, size - grip_w + 1))
        if grip_top < 4 or grip_left < 0 or grip_left + grip_w > size:
            return None
        arm = _arm_mask(size, grip_top, grip_left, grip_w, grip_h, bar_w)
        objects_px = labels > 0
        near = ndimage.binary_dilation(arm, structure=ndimage.generate_binary_structure(2, 1))
        touched = set(np.unique(labels[near & objects_px]).tolist())
        if contact:
            if touched != {mover}:
                return None
            moving = [mover, agent_label]
        else:
            if touched:
                return None
            moving = [agent_label]
            mover = agent_label
        items.append((arm, 0, 0, AGENT_COLOR))
        _, labels = _render(size, background, items, {})
        for k in range(1, n + 1):
            if (labels == k).sum() < 64:
                return None

    offsets = {lab: d for lab in moving}
    img0, seg0 = _render(size, background, items, {})
    img1, _ = _render(size, background, items, offsets)
    flow = np.zeros((size, size, 2), dtype=np.float32)
    moving_px = np.isin(seg0, moving)
    flow[moving_px, 0] = d[1]
    flow[moving_px, 1] = d[0]
    return Scene(
        frame0=_to_uint8(img0),
        frame1=_to_uint8(img1),
        flow=flow,
        segments=seg0.astype(np.int32),
        moved_label=int(mover),
        agent_label=agent_label,
        moving_labels=tuple(int(m) for m in moving),
        num_objects=n,
        meta={"displacement": [int(d[1]), int(d[0])]},
    )


def generate_scene(cfg, seed, mover_slot=0, contact=True):
    """Generate one scene; *contact* only matters in agent mode."""
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        scene = _try_scene(cfg, rng, mover_slot, contact)
        if scene is not None:
            scene.seed = int(seed)
            return scene
    raise GenerationError(f"could not place scene with seed {seed} after {cfg.max_retries} tries")


def agent_alone_schedule(index, fraction):
    """Deterministic contact schedule: within every block of 5 scenes,
    the first ``round(5 * fraction)`` show the agent moving alone."""
    return (index % 5) < int(round(5 * fraction))


def make_scenes(cfg, count, master_seed=None):
    master = cfg.seed if master_seed is None else master_seed
    scenes = []
    for i in range(count):
        seed = derive_seed(master, "scene", i)
        contact = not (cfg.agent_mode and agent_alone_schedule(i, cfg.agent_alone_fraction))
        scenes.append(generate_scene(cfg, seed, mover_slot=i, contact=contact))
    return scenes


def scene_record(i, scene, stem):
    return {
        "index": i,
        "seed": scene.seed,
        "frame0": f"{stem}_frame0.png",
        "frame1": f"{stem}_frame1.png",
        "flow": f"{stem}_flow.flo",
        "segments": f"{stem}_seg.png",
        "moved_label": scene.moved_label,
        "agent_label": scene.agent_label,
        "moving_labels": list(scene.moving_labels),
        "num_objects": scene.num_objects,
    }


MANIFEST = "manifest.jsonl"


def write_scene(out_dir, i, scene):
    out_dir = Path(out_dir)
    stem = f"scene_{i:05d}"
    rec = scene_record(i, scene, stem)
    io.write_rgb(out_dir / rec["frame0"], scene.frame0)
    io.write_rgb(out_dir / rec["frame1"], scene.frame1)
    io.write_flo(out_dir / rec["flow"], scene.flow)
    io.write_labels(out_dir / rec["segments"], scene.segments)
    return rec


def generate_dataset(cfg, count, out_dir, master_seed=None):
    """Write *count* scenes plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    rows = []
    for i, scene in enumerate(make_scenes(cfg, count, master_seed)):
        try:
            rows.append(write_scene(out_dir, i, scene))
        except OSError as exc:
            raise OSError(f"failed writing scene {i} to {out_dir}: {exc}") from exc
    manifest = out_dir / MANIFEST
    with open(manifest, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_dataset(data_dir, need_segments=False):
    """Load scenes listed in a manifest. Only ``frame0`` and ``flow`` are required."""
    data_dir = Path(data_dir)
    scenes = []
    for rec in read_manifest(data_dir):
        frame0 = io.read_rgb(data_dir / rec["frame0"])
        flow = io.read_flo(data_dir / rec["flow"])
        seg_name = rec.get("segments")
        seg = None
        if seg_name and (data_dir / seg_name).exists():
            seg = io.read_labels(data_dir / seg_name)
        elif need_segments:
            raise FileNotFoundError(f"missing segments for scene {rec.get('index')}")
        frame1 = None
        if rec.get("frame1") and (data_dir / rec["frame1"]).exists():
            frame1 = io.read_rgb(data_dir / rec["frame1"])
        scenes.append(
            Scene(
                frame0=frame0,
                frame1=frame1,
                flow=flow,
                segments=seg,
                moved_label=rec.get("moved_label", 0),
                agent_label=rec.get("agent_label"),
                moving_labels=tuple(rec.get("moving_labels", ())),
                num_objects=rec.get("num_objects", 0),
                seed=rec.get("seed", 0),
            )
        )
    return scenes
