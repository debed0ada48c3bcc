"""Per-pixel features, key/query projections and sparse pairwise affinities.

A feature map is an ``(H', W', 7)`` float array with channel layout::

    0..2  r, g, b            in [0, 1], 4x4 average pooled
    3     d(luminance)/dx    central difference, replicate padding
    4     d(luminance)/dy
    5     row / (H' - 1)     in [0, 1]
    6     col / (W' - 1)     in [0, 1]

Affinities live on a :class:`SparseSupport`, a CSR-style neighbor structure
over the ``H' * W'`` nodes (row-major flattening).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

FEATURE_CHANNELS = ("r", "g", "b", "grad_x", "grad_y", "row", "col")
NUM_FEATURES = len(FEATURE_CHANNELS)
DOWNSAMPLE = 4


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


def to_unit_rgb(image):
    """Return an ``(H, W, 3)`` float64 copy of *image* scaled to [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] < 3:
        raise DimensionError(f"expected an RGB raster, got shape {image.shape}")
    image = image[..., :3]
    if np.issubdtype(image.dtype, np.integer):
        out = image.astype(np.float64) / 255.0
    else:
        out = image.astype(np.float64)
    return np.clip(out, 0.0, 1.0)


def avg_pool(x, factor):
    """Average-pool the two leading axes of *x* by an integer factor."""
    h, w = x.shape[:2]
    if h % factor or w % factor:
        raise DimensionError(f"{h}x{w} not divisible by downsample factor {factor}")
    shape = (h // factor, factor, w // factor, factor) + x.shape[2:]
    return x.reshape(shape).mean(axis=(1, 3))


def _central_diff(lum, axis):
    padded = np.pad(lum, 1, mode="edge")
    if axis == 1:
        return 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    return 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])


def extract_features(image, downsample=DOWNSAMPLE):
    rgb = avg_pool(to_unit_rgb(image), downsample)
    h, w = rgb.shape[:2]
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    rows = np.linspace(0.0, 1.0, h) if h > 1 else np.zeros(1)
    cols = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    fm = np.concatenate(
        [
            rgb,
            _central_diff(lum, 1)[..., None],
            _central_diff(lum, 0)[..., None],
            rr[..., None],
            cc[..., None],
        ],
        axis=-1,
    )
    return fm


@dataclass
class ProjectionParams:
    w_key: np.ndarray
    w_query: np.ndarray

    def __post_init__(self):
        self.w_key = np.asarray(self.w_key, dtype=np.float64)
        self.w_query = np.asarray(self.w_query, dtype=np.float64)
        if self.w_key.shape != self.w_query.shape or self.w_key.ndim != 2:
            raise DimensionError(
                f"key/query shapes differ: {self.w_key.shape} vs {self.w_query.shape}"
            )
        if self.w_key.shape[0] < 1:
            raise DimensionError("embed_dim must be >= 1")
        if not (np.all(np.isfinite(self.w_key)) and np.all(np.isfinite(self.w_query))):
            raise NumericError("projection parameters must be finite")

    @property
    def embed_dim(self):
        return self.w_key.shape[0]

    @property
    def feature_dim(self):
        return self.w_key.shape[1]

    @classmethod
    def random(cls, embed_dim=32, feature_dim=NUM_FEATURES, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        std = scale / np.sqrt(feature_dim)
        return cls(
            rng.normal(0.0, std, (embed_dim, feature_dim)),
            rng.normal(0.0, std, (embed_dim, feature_dim)),
        )

    def copy(self):
        return ProjectionParams(self.w_key.copy(), self.w_query.copy())


@dataclass
class SparseSupport:
    """Per-row sorted, duplicate-free neighbor lists in CSR layout."""

    height: int
    width: int
    indptr: np.ndarray
    indices: np.ndarray
    window_radius: int = 0
    global_per_row: int = 0
    seed: int = 0
    _rows: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self):
        return self.height * self.width

    @property
    def nnz(self):
        return len(self.indices)

    @property
    def rows(self):
        """Row (source node) index of every stored pair."""
        if self._rows is None:
            self._rows = np.repeat(
                np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr)
            )
        return self._rows

    def neighbors(self, node):
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    def density(self):
        return self.nnz / float(self.num_nodes**2)

    def to_csr(self, values):
        n = self.num_nodes
        return sp.csr_matrix((values, self.indices, self.indptr), shape=(n, n))

    def to_dense(self, values):
        n = self.num_nodes
        out = np.zeros((n, n), dtype=np.asarray(values).dtype)
        out[self.rows, self.indices] = values
        return out

    def is_symmetric(self):
        pattern = self.to_csr(np.ones(self.nnz, dtype=np.int8))
        return (pattern != pattern.T).nnz == 0

    def transpose_index(self):
        """For each stored pair (a, b), the position of (b, a), or -1."""
        n = self.num_nodes
        keys = self.rows * n + self.indices
        rkeys = self.indices.astype(np.int64) * n + self.rows
        pos = np.searchsorted(keys, rkeys)
        pos = np.minimum(pos, len(keys) - 1)
        return np.where(keys[pos] == rkeys, pos, -1)


def _window_indices(i, j, h, w, r):
    r0, r1 = max(0, i - r), min(h - 1, i + r)
    c0, c1 = max(0, j - r), min(w - 1, j + r)
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    return (rr * w + cc).ravel(), (r0, r1, c0, c1)


def build_support(h, w, window_radius=12, global_per_row=16, seed=0):
    if window_radius < 0 or global_per_row < 0:
        raise ValueError("window_radius and global_per_row must be non-negative")
    n = h * w
    rng = np.random.default_rng(seed)
    all_idx = np.arange(n)
    row_lists = []
    for node in range(n):
        i, j = divmod(node, w)
        local, (r0, r1, c0, c1) = _window_indices(i, j, h, w, window_radius)
        n_out = n - len(local)
        k = min(global_per_row, n_out)
        if k == 0:
            row_lists.append(local)
            continue
        if n_out <= 4 * k:
            ii, jj = np.divmod(all_idx, w)
            outside = all_idx[~((ii >= r0) & (ii <= r1) & (jj >= c0) & (jj <= c1))]
            picks = rng.choice(outside, size=k, replace=False)
        else:
            chosen = set()
            while len(chosen) < k:
                cand = rng.integers(0, n, size=2 * (k - len(chosen)))
                ci, cj = np.divmod(cand, w)
                inside = (ci >= r0) & (ci <= r1) & (cj >= c0) & (cj <= c1)
                for c in cand[~inside]:
                    if len(chosen) == k:
                        break
                    chosen.add(int(c))
            picks = np.fromiter(sorted(chosen), dtype=np.int64)
        row_lists.append(np.union1d(local, picks))
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in row_lists])
    indices = np.concatenate(row_lists).astype(np.int64)
    return SparseSupport(h, w, indptr, indices, window_radius, global_per_row, seed)


def segment_max(values, indptr):
    return np.maximum.reduceat(values, indptr[:-1])


def segment_sum(values, indptr):
    return np.add.reduceat(values, indptr[:-1])


def row_softmax(logits, support):
    """Softmax of *logits* over each row's stored entries (max-shifted)."""
    rows = support.rows
    shifted = logits - segment_max(logits, support.indptr)[rows]
    e = np.exp(shifted)
    return e / segment_sum(e, support.indptr)[rows]


def row_max_normalize(values, support):
    m = segment_max(values, support.indptr)
    safe = np.where(m > 0, m, 1.0)
    return values / safe[support.rows]


@dataclass
class AffinityGraph:
    support: SparseSupport
    softmax_affinity: np.ndarray
    normalized_affinity: np.ndarray
    logits: np.ndarray = field(default=None, repr=False)

    @property
    def height(self):
        return self.support.height

    @property
    def width(self):
        return self.support.width

    @classmethod
    def from_normalized(cls, support, normalized):
        """Wrap externally supplied affinities in [0, 1] (oracles, meta-affinities)."""
        normalized = np.clip(np.asarray(normalized, dtype=np.float64), 0.0, 1.0)
        sums = segment_sum(normalized, support.indptr)
        safe = np.where(sums > 0, sums, 1.0)
        return cls(support, normalized / safe[support.rows], normalized)


def embed(fm, params):
    flat = fm.reshape(-1, fm.shape[-1])
    return flat @ params.w_key.T, flat @ params.w_query.T


def affinity_logits(fm, params, support):
    keys, queries = embed(fm, params)
    scale = 1.0 / np.sqrt(params.embed_dim)
    if support.density() > 0.25:
        full = (keys @ queries.T) * scale
        return full[support.rows, support.indices]
    return np.einsum("nd,nd->n", keys[support.rows], queries[support.indices]) * scale


def compute_affinities(fm, params, support):
    if fm.shape[0] * fm.shape[1] != support.num_nodes:
        raise DimensionError(
            f"feature map {fm.shape[:2]} does not match support "
            f"{support.height}x{support.width}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        logits = affinity_logits(fm, params, support)
    bad = ~np.isfinite(logits)
    if bad.any():
        row = int(support.rows[np.argmax(bad)])
        raise NumericError(f"non-finite affinity logit in row {row}", row=row)
    soft = row_softmax(logits, support)
    return AffinityGraph(support, soft, row_max_normalize(soft, support), logits)
