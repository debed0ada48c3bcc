"""Kaleidoscopic Propagation: excitatory/inhibitory message passing on plateau maps.

Plateau maps are ``(H, W, Q)`` float arrays whose vectors are unit norm (or
exactly zero) and non-negative after every iteration.
"""

from dataclasses import dataclass

import numpy as np

from .features import segment_sum

NORM_EPS = 1e-12
EXCITATORY_THRESHOLD = 0.5
# above this support density the message matrices are materialized densely
DENSE_THRESHOLD = 0.25


@dataclass
class SignedAffinities:
    excitatory: object  # (N, N) csr matrix or dense ndarray
    inhibitory: object

    @property
    def num_nodes(self):
        return self.excitatory.shape[0]


def _row_normalize(values, support):
    sums = segment_sum(values, support.indptr)
    safe = np.where(sums > 0, sums, 1.0)
    return values / safe[support.rows]


def split_affinities(graph, inhibition="inverted", dense=None):
    """Split max-normalized affinities into row-stochastic A+ and A-.

    ``A >= 0.5`` goes to the excitatory matrix with weight ``A``; the rest goes
    to the inhibitory matrix with weight ``1 - A`` (``inhibition="inverted"``)
    or the raw ``A`` (``inhibition="raw"``).
    """
    support = graph.support
    a = graph.normalized_affinity
    high = a >= EXCITATORY_THRESHOLD
    plus = np.where(high, a, 0.0)
    if inhibition == "inverted":
        minus = np.where(high, 0.0, 1.0 - a)
    elif inhibition == "raw":
        minus = np.where(high, 0.0, a)
    else:
        raise ValueError(f"unknown inhibition mode {inhibition!r}")
    plus = _row_normalize(plus, support)
    minus = _row_normalize(minus, support)
    if dense is None:
        dense = support.density() > DENSE_THRESHOLD
    if dense:
        return SignedAffinities(support.to_dense(plus), support.to_dense(minus))
    return SignedAffinities(support.to_csr(plus), support.to_csr(minus))


def l2_normalize(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, NORM_EPS)


def softmax_normalize(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def init_plateau(h, w, q, seed):
    if q < 2:
        raise ValueError("plateau dimension q must be >= 2")
    rng = np.random.default_rng(seed)
    return l2_normalize(rng.uniform(0.0, 1.0, size=(h, w, q)))


def _propagate(matrix, x, active):
    if active is not None:
        x = x * active[:, None]
    out = matrix @ x
    return np.asarray(out)


def kprop_step(h, sa, active_mask=None, excitatory=True, inhibitory=True, norm="l2"):
    """One KProp iteration.

    *active_mask* is a boolean vector over nodes selecting which nodes may
    send messages; ``None`` means every node sends.
    """
    shape = h.shape
    x = h.reshape(-1, shape[-1])
    active = None if active_mask is None else np.asarray(active_mask, dtype=x.dtype).ravel()
    if excitatory:
        x = x + _propagate(sa.excitatory, x, active)
    if inhibitory:
        x = x - _propagate(sa.inhibitory, x, active)
    x = np.maximum(x, 0.0)
    if norm == "l2":
        x = l2_normalize(x)
    elif norm == "softmax":
        x = softmax_normalize(x)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return x.reshape(shape)


def run_kprop(
    graph,
    iters=40,
    q=256,
    seed=0,
    excitatory=True,
    inhibitory=True,
    norm="l2",
    inhibition="inverted",
    h0=None,
):
    """Run *iters* KProp iterations from a seeded random plateau map.

    The first iteration lets only one seed-chosen node send messages.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    hgt, wid = graph.height, graph.width
    sa = split_affinities(graph, inhibition=inhibition)
    h = init_plateau(hgt, wid, q, seed) if h0 is None else np.array(h0, dtype=np.float64)
    n = hgt * wid
    sender = np.random.default_rng([seed, 1]).integers(n)
    first = np.zeros(n, dtype=bool)
    first[sender] = True
    h = kprop_step(h, sa, first, excitatory, inhibitory, norm)
    for _ in range(iters - 1):
        h = kprop_step(h, sa, None, excitatory, inhibitory, norm)
    return h


def cosine_matrix(h):
    x = h.reshape(-1, h.shape[-1])
    x = l2_normalize(x)
    return x @ x.T
