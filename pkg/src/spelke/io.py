"""Raster and flow file formats.

* RGB images: 8-bit PNG.
* Label maps: 16-bit grayscale PNG.
* Flow: Middlebury ``.flo`` -- magic ``PIEH`` (float32 202021.25), little-endian
  int32 width and height, then interleaved float32 ``(dx, dy)`` in row-major
  order.
"""

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    pass


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be HxWx2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: not a Middlebury .flo file")
    w, h = np.frombuffer(data[4:12], dtype="<i4")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    expected = 12 + 8 * int(w) * int(h)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    flow = np.frombuffer(data[12:], dtype="<f4").reshape(int(h), int(w), 2)
    return flow.astype(np.float32)


def _open(path):
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    return img


def write_rgb(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
        image = image.astype(np.uint8)
    Image.fromarray(image[..., :3]).save(path, format="PNG")


def read_rgb(path):
    return np.asarray(_open(path).convert("RGB"), dtype=np.uint8)


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise FormatError("labels must fit in uint16")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_labels(path):
    img = _open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        raise FormatError(f"{path}: expected a single-channel label image")
    return arr.astype(np.int32)


def label_colors(n, seed=0):
    """Deterministic distinct-ish colors for labels 1..n (label 0 black)."""
    rng = np.random.default_rng(seed)
    colors = rng.integers(40, 256, size=(n + 1, 3)).astype(np.uint8)
    colors[0] = 0
    return colors


def render_overlay(labels, image=None, alpha=0.5):
    labels = np.asarray(labels)
    colors = label_colors(int(labels.max(initial=0)))
    color = colors[labels].astype(np.float64)
    if image is None:
        return color.astype(np.uint8)
    image = np.asarray(image)[..., :3].astype(np.float64)
    if image.shape[:2] != labels.shape:
        from .evaluation import upsample_nearest

        color = colors[upsample_nearest(labels, image.shape[:2])].astype(np.float64)
    out = (1 - alpha) * image + alpha * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
