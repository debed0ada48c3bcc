"""Winner-take-all extraction of a panoptic segmentation from a plateau map.

Anchors sit at plateau-map positions, read the vector there, and claim a soft
mask of cosine agreement. Overlapping anchors (soft Jaccard above ``theta``)
compete on total mask weight; losers are deactivated and re-seeded on
territory no retained mask covers yet.
"""

from dataclasses import dataclass

import numpy as np

BACKGROUND_THRESHOLD = 0.5


@dataclass
class ObjectAnchor:
    position: tuple
    vector: np.ndarray
    mask: np.ndarray
    active: bool = True

    @property
    def weight(self):
        return float(self.mask.sum())


def clamp_unit(x):
    """Clamp masks and coverage into [0, 1]; the single clamping point."""
    return np.clip(x, 0.0, 1.0)


def make_anchor(h, position):
    r, c = position
    vec = np.array(h[r, c], dtype=np.float64)
    return ObjectAnchor((int(r), int(c)), vec, np.zeros(h.shape[:2]), True)


def compute_masks(h, anchors):
    for a in anchors:
        if a.active:
            a.mask = clamp_unit(h @ a.vector)
        else:
            a.mask = np.zeros(h.shape[:2])
    return anchors


def soft_jaccard(m1, m2):
    """Sum of elementwise min over sum of elementwise max; 0 for two empty masks."""
    num = np.minimum(m1, m2).sum()
    den = np.maximum(m1, m2).sum()
    return float(num / den) if den > 0 else 0.0


def jaccard_matrix(masks):
    """Pairwise soft Jaccard for a ``(K, N)`` stack of masks."""
    k = masks.shape[0]
    out = np.zeros((k, k))
    for i in range(k):
        mins = np.minimum(masks[i], masks[i + 1 :]).sum(axis=1)
        maxs = np.maximum(masks[i], masks[i + 1 :]).sum(axis=1)
        vals = np.divide(mins, maxs, out=np.zeros_like(mins), where=maxs > 0)
        out[i, i + 1 :] = vals
        out[i + 1 :, i] = vals
    return out


def compete(anchors, theta=0.2):
    """Deactivate every active anchor that loses at least one pairwise contest."""
    idx = [i for i, a in enumerate(anchors) if a.active]
    if len(idx) < 2:
        return anchors
    masks = np.stack([anchors[i].mask.ravel() for i in idx])
    weights = masks.sum(axis=1)
    jac = jaccard_matrix(masks)
    lost = np.zeros(len(idx), dtype=bool)
    for p in range(len(idx)):
        for q in range(p + 1, len(idx)):
            if jac[p, q] > theta:
                # ties go to the lower anchor index
                if weights[p] >= weights[q]:
                    lost[q] = True
                else:
                    lost[p] = True
    for p, i in enumerate(idx):
        if lost[p]:
            anchors[i].active = False
            anchors[i].mask = np.zeros_like(anchors[i].mask)
    return anchors


def uncovered(anchors, shape):
    total = np.zeros(shape)
    for a in anchors:
        if a.active:
            total += a.mask
    return clamp_unit(1.0 - total)


def labels_from_masks(masks, threshold=BACKGROUND_THRESHOLD):
    """Argmax over a ``(M, H, W)`` stack; pixels whose best value < threshold get 0.

    Labels are compacted so that every label 1..M' owns at least one pixel;
    returns ``(labels, kept)`` where *kept* indexes the surviving masks.
    """
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[0] == 0:
        return np.zeros(masks.shape[1:], dtype=np.int32), np.zeros(0, dtype=int)
    best = np.argmax(masks, axis=0)
    val = np.max(masks, axis=0)
    raw = np.where(val >= threshold, best + 1, 0)
    kept = np.unique(raw[raw > 0]) - 1
    lut = np.zeros(masks.shape[0] + 1, dtype=np.int32)
    lut[kept + 1] = np.arange(1, len(kept) + 1, dtype=np.int32)
    return lut[raw], kept


def softmax_masks(masks):
    """Pixelwise softmax across the mask dimension of a ``(M, H, W)`` stack."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[0] == 0:
        return masks
    e = np.exp(masks - masks.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def run_competition(h, k_max=32, rounds=3, theta=0.2, seed=0):
    """Return ``(labels, masks)``.

    *labels* is an ``(H, W)`` int32 map (0 = background / unassigned) and
    *masks* the ``(M, H, W)`` clamped soft masks of the segments that own
    pixels, in label order.
    """
    if k_max < 1 or rounds < 1:
        raise ValueError("k_max and rounds must be >= 1")
    h = np.asarray(h, dtype=np.float64)
    hh, ww = h.shape[:2]
    n = hh * ww
    rng = np.random.default_rng(seed)
    positions = rng.choice(n, size=k_max, replace=k_max > n)
    anchors = [make_anchor(h, divmod(int(p), ww)) for p in positions]
    compute_masks(h, anchors)
    compete(anchors, theta)
    for _ in range(rounds - 1):
        dead = [a for a in anchors if not a.active]
        if not dead:
            break
        cover = uncovered(anchors, (hh, ww)).ravel()
        total = cover.sum()
        if total <= 0:
            break
        picks = rng.choice(n, size=len(dead), p=cover / total)
        fresh = []
        for a, p in zip(dead, picks):
            new = make_anchor(h, divmod(int(p), ww))
            a.position, a.vector, a.active = new.position, new.vector, True
            fresh.append(a)
        compute_masks(h, fresh)
        compete(anchors, theta)
    live = [a.mask for a in anchors if a.active]
    stack = np.stack(live) if live else np.zeros((0, hh, ww))
    labels, kept = labels_from_masks(stack)
    return labels, stack[kept]


def argmax_readout(h):
    """Ablation readout: label every nonzero plateau vector by its largest channel."""
    h = np.asarray(h)
    nonzero = np.abs(h).sum(axis=-1) > 0
    raw = np.where(nonzero, np.argmax(h, axis=-1) + 1, 0)
    _, inv = np.unique(raw, return_inverse=True)
    inv = inv.reshape(raw.shape)
    if (raw == 0).any():
        return inv.astype(np.int32)
    return (inv + 1).astype(np.int32)
