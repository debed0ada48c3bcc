"""Matched-mIoU scoring, panoptic conversion and a discrete LabelProp baseline."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment

REPORT_SCHEMA_VERSION = 1


def upsample_nearest(labels, shape):
    """Nearest-neighbor resize of an integer raster to *shape*."""
    labels = np.asarray(labels)
    if labels.shape == tuple(shape):
        return labels
    h, w = labels.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return labels[rows[:, None], cols[None, :]]


def iou_matrix(pred, gt):
    """IoU between every nonzero gt segment (rows) and nonzero pred segment (cols)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    gt_ids = np.unique(gt[gt != 0])
    pred_ids = np.unique(pred[pred != 0])
    if len(gt_ids) == 0 or len(pred_ids) == 0:
        return np.zeros((len(gt_ids), len(pred_ids))), gt_ids, pred_ids
    gi = np.searchsorted(gt_ids, gt)
    pi = np.searchsorted(pred_ids, pred)
    gvalid = (gi < len(gt_ids)) & (gt != 0)
    pvalid = (pi < len(pred_ids)) & (pred != 0)
    both = gvalid & pvalid
    inter = np.zeros((len(gt_ids), len(pred_ids)))
    np.add.at(inter, (gi[both], pi[both]), 1.0)
    gsize = np.bincount(gi[gvalid], minlength=len(gt_ids)).astype(np.float64)
    psize = np.bincount(pi[pvalid], minlength=len(pred_ids)).astype(np.float64)
    union = gsize[:, None] + psize[None, :] - inter
    return inter / union, gt_ids, pred_ids


def matched_scores(iou):
    """Per-gt IoU under the maximum-weight one-to-one assignment (0 if unmatched)."""
    iou = np.asarray(iou, dtype=np.float64)
    scores = np.zeros(iou.shape[0])
    if iou.size == 0:
        return scores
    r, c = linear_sum_assignment(iou, maximize=True)
    scores[r] = iou[r, c]
    return scores


def assignment_score(iou):
    """Mean over gt rows of the matched IoU; summed in row order."""
    scores = matched_scores(iou)
    return float(np.sum(scores) / len(scores)) if len(scores) else float("nan")


def matched_miou(pred, gt):
    """Matched mIoU of one image, or ``None`` when *gt* has no foreground."""
    gt = np.asarray(gt)
    pred = upsample_nearest(pred, gt.shape)
    iou, gt_ids, _ = iou_matrix(pred, gt)
    if len(gt_ids) == 0:
        return None
    return assignment_score(iou)


def best_match_labels(pred, gt):
    """Map each gt label to its assigned pred label (0 when unmatched)."""
    gt = np.asarray(gt)
    pred = upsample_nearest(pred, gt.shape)
    iou, gt_ids, pred_ids = iou_matrix(pred, gt)
    out = {int(g): 0 for g in gt_ids}
    if iou.size:
        r, c = linear_sum_assignment(iou, maximize=True)
        for i, j in zip(r, c):
            if iou[i, j] > 0:
                out[int(gt_ids[i])] = int(pred_ids[j])
    return out


def to_panoptic(soft_masks, threshold=0.5, shape=None):
    """Highest-confidence mask per pixel where any mask reaches *threshold*.

    An empty mask list gives an all-background map of *shape*.
    """
    masks = [np.asarray(m, dtype=np.float64) for m in soft_masks]
    if not masks:
        if shape is None:
            raise ValueError("shape is required when no masks are given")
        return np.zeros(shape, dtype=np.int32)
    stack = np.stack(masks)
    best = np.argmax(stack, axis=0)
    val = np.max(stack, axis=0)
    return np.where(val >= threshold, best + 1, 0).astype(np.int32)


def label_prop_baseline(graph, iters=50, seed=0):
    """Synchronous discrete label propagation on the max-normalized affinities.

    Each node starts with a unique label (a seeded permutation of node ids)
    and repeatedly adopts the label with the largest summed affinity among
    its neighbors (self excluded), ties to the smaller label.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    support = graph.support
    n = support.num_nodes
    offdiag = support.rows != support.indices
    w = sp.csr_matrix(
        (
            graph.normalized_affinity[offdiag],
            (support.rows[offdiag], support.indices[offdiag]),
        ),
        shape=(n, n),
    )
    labels = np.random.default_rng(seed).permutation(n)
    for _ in range(iters):
        ids, compact = np.unique(labels, return_inverse=True)
        onehot = sp.csr_matrix(
            (np.ones(n), (np.arange(n), compact)), shape=(n, len(ids))
        )
        votes = (w @ onehot).toarray()
        has_vote = votes.max(axis=1) > 0
        # argmax returns the first maximum, i.e. the smallest label id
        new = np.where(has_vote, ids[np.argmax(votes, axis=1)], labels)
        if np.array_equal(new, labels):
            break
        labels = new
    _, compact = np.unique(labels, return_inverse=True)
    return (compact + 1).reshape(support.height, support.width).astype(np.int32)


@dataclass
class EvalReport:
    per_image_miou: list
    mean_miou: float
    num_gt_segments: list
    num_images: int
    num_skipped: int
    runtime_ms: dict = field(default_factory=dict)
    names: list = field(default_factory=list)

    def to_json(self):
        payload = asdict(self)
        payload["schema_version"] = REPORT_SCHEMA_VERSION
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        payload.pop("schema_version", None)
        return cls(**payload)


def evaluate_pairs(pairs, names=None, runtime_ms=None):
    """Build an :class:`EvalReport` from ``(pred, gt)`` label-map pairs."""
    per_image, counts = [], []
    for pred, gt in pairs:
        counts.append(int(len(np.unique(gt[gt != 0]))))
        per_image.append(matched_miou(pred, gt))
    scored = [v for v in per_image if v is not None]
    mean = float(np.mean(scored)) if scored else float("nan")
    return EvalReport(
        per_image_miou=per_image,
        mean_miou=mean,
        num_gt_segments=counts,
        num_images=len(per_image),
        num_skipped=len(per_image) - len(scored),
        runtime_ms=dict(runtime_ms or {}),
        names=list(names or []),
    )
