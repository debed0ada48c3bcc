"""Shared oracles for the test suite."""

import itertools

import numpy as np

from spelke.blocks import block_affinity_graph, voronoi_blocks
from spelke.competition import run_competition
from spelke.evaluation import matched_miou
from spelke.kprop import run_kprop

BLOCK_COUNTS = (2, 3, 5)
GRID = 16


def oracle_graphs(seeds=20, ks=BLOCK_COUNTS, size=GRID, **kw):
    """(labels, graph) for every block count and seed."""
    out = []
    for k in ks:
        for s in range(seeds):
            labels = voronoi_blocks(size, size, k, seed=1000 * k + s)
            out.append((labels, block_affinity_graph(labels, seed=s, **kw)))
    return out


def oracle_suite_miou(graphs, iters=40, rounds=3, seed_offset=0, **kprop_kw):
    scores = []
    for i, (labels, graph) in enumerate(graphs):
        h = run_kprop(graph, iters=iters, q=256, seed=i + seed_offset, **kprop_kw)
        pred, _ = run_competition(h, k_max=32, rounds=rounds, theta=0.2, seed=i + seed_offset)
        scores.append(matched_miou(pred, labels))
    return float(np.mean(scores))


def brute_force_assignment(iou):
    """Best mean matched IoU over all one-to-one row/column matchings.

    Per-row scores are summed in row order, the same reduction the library
    uses, so equal assignments give bit-identical results.
    """
    g, p = iou.shape
    if p >= g:
        matchings = ((range(g), cols) for cols in itertools.permutations(range(p), g))
    else:
        matchings = ((rows, range(p)) for rows in itertools.permutations(range(g), p))
    best = None
    for rows, cols in matchings:
        scores = np.zeros(g)
        scores[list(rows)] = iou[list(rows), list(cols)]
        total = np.sum(scores)
        if best is None or total > best:
            best = total
    return float(best / g)


# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def report(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def bfs_components(mask):
    """4-connected components of a boolean mask by explicit flood fill."""
    h, w = mask.shape
    comp = np.zeros((h, w), dtype=np.int64)
    n = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and comp[i, j] == 0:
                n += 1
                stack = [(i, j)]
                comp[i, j] = n
                while stack:
                    y, x = stack.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and comp[yy, xx] == 0:
                            comp[yy, xx] = n
                            stack.append((yy, xx))
    return comp, n
