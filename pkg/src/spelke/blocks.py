"""Oracle affinity graphs built from known block partitions.

Used to check the grouping stack independently of any learned affinities.
"""

import numpy as np

from .features import AffinityGraph, build_support


def voronoi_blocks(h, w, k, seed):
    """Partition an ``h x w`` grid into *k* nonempty Voronoi cells, labels 1..k."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        centers = rng.choice(h * w, size=k, replace=False)
        ci, cj = np.divmod(centers, w)
        ii, jj = np.mgrid[0:h, 0:w]
        d = (ii[..., None] - ci) ** 2 + (jj[..., None] - cj) ** 2
        labels = np.argmin(d, axis=-1) + 1
        sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
        if sizes.min() >= max(2, (h * w) // (4 * k)):
            return labels
    return labels


def stripe_blocks(h, w, k):
    cols = np.arange(w)
    labels = (cols * k) // w + 1
    return np.broadcast_to(labels, (h, w)).copy()


def block_affinity_graph(
    labels, support=None, within=1.0, across=0.01, noise=0.0, seed=0
):
    """Affinities equal to *within* inside a block and *across* between blocks.

    With ``noise > 0`` the within-block values are drawn uniformly from
    ``[within - noise, within]`` (self-affinity stays at *within*).
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    if support is None:
        support = build_support(h, w, window_radius=12, global_per_row=0, seed=seed)
    flat = labels.ravel()
    same = flat[support.rows] == flat[support.indices]
    values = np.where(same, within, across).astype(np.float64)
    if noise > 0:
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(0.0, noise, size=values.shape)
        values = np.where(same, values - jitter, values)
        values[support.rows == support.indices] = within
    return AffinityGraph.from_normalized(support, values)
