"""Motion-derived training targets.

Flow is turned into motion segments by embedding it in a centroid encoding
(a "flow plateau map") and running Competition on it; the largest segment is
background. Connectivity targets and loss masks are then set per support
pair, optionally overwritten by a teacher's confident segments.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .competition import run_competition
from .features import DimensionError, avg_pool, AffinityGraph, row_max_normalize
from .kprop import l2_normalize, run_kprop

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
MIN_CONFIDENT_AREA = 10
FLOW_NORM_EPS = 1e-6


@dataclass
class ConnectivityTarget:
    target: np.ndarray  # uint8 over support entries
    loss_mask: np.ndarray  # uint8 over support entries


def _pool_factor(src_shape, dst_shape):
    fh, rh = divmod(src_shape[0], dst_shape[0])
    fw, rw = divmod(src_shape[1], dst_shape[1])
    if rh or rw or fh != fw or fh < 1:
        raise DimensionError(f"cannot pool {src_shape} to {dst_shape}")
    return fh


def motion_indicator(flow, tau=0.5, target_dims=None):
    """Binary map of ``|flow| > tau`` after average pooling the magnitude."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    flow = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    if target_dims is not None and tuple(target_dims) != mag.shape:
        mag = avg_pool(mag, _pool_factor(mag.shape, target_dims))
    return (mag > tau).astype(np.uint8)


def square_grid(q):
    """Factor *q* into ``(q_h, q_w)`` as close to square as possible."""
    q_h = int(np.floor(np.sqrt(q)))
    while q % q_h:
        q_h -= 1
    return q_h, q // q_h


def centroid_grid(q_h, q_w):
    """One-hot ``(q_h, q_w, q_h * q_w)`` grid: cell (i, j) owns channel i * q_w + j."""
    q = q_h * q_w
    return np.eye(q).reshape(q_h, q_w, q)


def bilinear_sample(grid, ys, xs):
    """Sample *grid* at fractional cell coordinates (clipped to the grid)."""
    gh, gw = grid.shape[:2]
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, gh - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, gw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    return (
        grid[y0, x0] * (1 - wy) * (1 - wx)
        + grid[y0, x1] * (1 - wy) * wx
        + grid[y1, x0] * wy * (1 - wx)
        + grid[y1, x1] * wy * wx
    )


def _corner_coords(n_out, n_in):
    if n_out == 1:
        return np.full(1, (n_in - 1) / 2.0)
    return np.linspace(0.0, n_in - 1, n_out)


def centroid_encoding(q_h, q_w, out_dims):
    """Bilinearly upsampled, per-pixel l2-normalized centroid encoding."""
    grid = centroid_grid(q_h, q_w)
    ys = _corner_coords(out_dims[0], q_h)
    xs = _corner_coords(out_dims[1], q_w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return l2_normalize(bilinear_sample(grid, yy, xx))


def normalize_flow(flow):
    """Scale flow linearly into [-1, 1] by its largest absolute component."""
    flow = np.asarray(flow, dtype=np.float64)
    denom = max(float(np.abs(flow).max()) if flow.size else 0.0, FLOW_NORM_EPS)
    return flow / denom


def flow_plateau(flow, q_h=16, q_w=16):
    """Embed each flow vector by bilinear lookup into the centroid grid."""
    fn = normalize_flow(flow)
    xs = (fn[..., 0] + 1.0) * 0.5 * (q_w - 1)
    ys = (fn[..., 1] + 1.0) * 0.5 * (q_h - 1)
    return l2_normalize(bilinear_sample(centroid_grid(q_h, q_w), ys, xs))


def mode_pool(labels, factor):
    """Majority label in each ``factor x factor`` block; ties go to the lower label."""
    h, w = labels.shape
    if h % factor or w % factor:
        raise DimensionError(f"{h}x{w} not divisible by {factor}")
    blocks = labels.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, factor * factor)
    n_labels = int(labels.max()) + 1
    counts = np.stack([(blocks == v).sum(axis=-1) for v in range(n_labels)], axis=-1)
    return np.argmax(counts, axis=-1).astype(labels.dtype)


def relabel_background(labels):
    """Make the largest segment label 0 and renumber the rest 1..M in order."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    # strict maximum; ties go to the lower label (argmax picks the first)
    bg = ids[np.argmax(counts)]
    out = np.zeros_like(labels, dtype=np.int32)
    nxt = 1
    for v in ids:
        if v == bg:
            continue
        out[labels == v] = nxt
        nxt += 1
    return out


def motion_segments(flow, q=256, seed=0, target_dims=None, k_max=32, rounds=3, theta=0.2):
    """Segment flow into motion sources; label 0 is the (largest) background.

    Competition runs at the flow's own resolution; when *target_dims* is
    smaller the labels are majority-pooled down to it.
    """
    q_h, q_w = square_grid(q)
    fp = flow_plateau(flow, q_h, q_w)
    raw, _ = run_competition(fp, k_max=k_max, rounds=rounds, theta=theta, seed=seed)
    labels = relabel_background(raw)
    if target_dims is not None and tuple(target_dims) != labels.shape:
        labels = relabel_background(mode_pool(labels, _pool_factor(labels.shape, target_dims)))
    return labels


def connectivity_targets(sm, ind, teacher, support):
    """Per-pair connectivity target and loss mask on *support*.

    *sm* motion segments (0 = static), *ind* motion indicator, *teacher*
    confident segments (0 = not confident) or ``None``.
    """
    dims = (support.height, support.width)
    sm = np.asarray(sm)
    ind = np.asarray(ind).astype(bool)
    if sm.shape != dims or ind.shape != dims:
        raise DimensionError(f"motion maps {sm.shape}/{ind.shape} do not match support {dims}")
    if teacher is None:
        teacher = np.zeros(dims, dtype=np.int32)
    teacher = np.asarray(teacher)
    if teacher.shape != dims:
        raise DimensionError(f"teacher map {teacher.shape} does not match support {dims}")
    a, b = support.rows, support.indices
    sm, ind, tch = sm.ravel(), ind.ravel(), teacher.ravel()
    # moving xor static pairs stay 0; positives need a shared nonzero motion segment
    c_tilde = ind[a] & ind[b] & (sm[a] == sm[b]) & (sm[a] > 0)
    loss_mask = (ind[a] | (tch[a] > 0)) | (ind[b] | (tch[b] > 0))
    confident = (tch[a] + tch[b]) > 0
    c_hat = np.where(confident, tch[a] == tch[b], c_tilde)
    return ConnectivityTarget(c_hat.astype(np.uint8), loss_mask.astype(np.uint8))


def meta_affinities(run_outputs, support):
    """Fraction of runs in which both endpoints share the same nonzero label."""
    a, b = support.rows, support.indices
    acc = np.zeros(support.nnz)
    for seg in run_outputs:
        s = np.asarray(seg).ravel()
        acc += (s[a] == s[b]) & (s[a] > 0)
    return acc / len(run_outputs)


def largest_component_filter(labels, min_area=MIN_CONFIDENT_AREA):
    """Keep each label's largest 4-connected component; drop those below *min_area*."""
    out = np.zeros_like(labels, dtype=np.int32)
    nxt = 1
    for v in np.unique(labels):
        if v == 0:
            continue
        comp, n = ndimage.label(labels == v, structure=FOUR_CONNECTED)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        best = int(np.argmax(sizes)) + 1
        if sizes[best - 1] < min_area:
            continue
        out[comp == best] = nxt
        nxt += 1
    return out


def confident_segments(
    run_outputs,
    q=256,
    seed=0,
    support=None,
    kprop_iters=40,
    k_max=32,
    rounds=3,
    theta=0.2,
    min_area=MIN_CONFIDENT_AREA,
):
    """Segments that are consistent across teacher runs with different seeds.

    Pixels left unlabeled in at least half of the runs can never be
    confident.
    """
    if not run_outputs:
        raise ValueError("need at least one run output")
    runs = [np.asarray(r) for r in run_outputs]
    dims = runs[0].shape
    if support is None:
        from .features import build_support

        support = build_support(dims[0], dims[1], 12, 16, seed)
    meta = meta_affinities(runs, support)
    if not meta.any():
        return np.zeros(dims, dtype=np.int32)
    graph = AffinityGraph.from_normalized(support, row_max_normalize(meta, support))
    h = run_kprop(graph, iters=kprop_iters, q=q, seed=seed)
    labels, _ = run_competition(h, k_max=k_max, rounds=rounds, theta=theta, seed=seed)
    labelled = np.mean([r > 0 for r in runs], axis=0)
    labels = np.where(labelled > 0.5, labels, 0)
    return largest_component_filter(labels, min_area)
