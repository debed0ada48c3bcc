"""Image -> features -> affinities -> KProp -> Competition."""

from dataclasses import dataclass

import numpy as np

from .competition import run_competition
from .features import build_support, compute_affinities, extract_features
from .kprop import run_kprop


@dataclass
class ModelConfig:
    embed_dim: int = 32
    q_dim: int = 256
    k_max: int = 32
    comp_rounds: int = 3
    kprop_iters: int = 40
    theta: float = 0.2
    window: int = 12
    global_samples: int = 16
    downsample: int = 4
    support_seed: int = 0
    tau: float = 0.5


_SUPPORT_CACHE = {}


def support_for(h, w, model):
    """Support shared by every image of a given feature size (cached)."""
    key = (h, w, model.window, model.global_samples, model.support_seed)
    if key not in _SUPPORT_CACHE:
        _SUPPORT_CACHE[key] = build_support(h, w, model.window, model.global_samples, model.support_seed)
    return _SUPPORT_CACHE[key]


def image_graph(image, params, model):
    fm = extract_features(image, model.downsample)
    support = support_for(fm.shape[0], fm.shape[1], model)
    return compute_affinities(fm, params, support)


def segment_graph(graph, model, seed):
    h = run_kprop(graph, iters=model.kprop_iters, q=model.q_dim, seed=seed)
    labels, masks = run_competition(
        h, k_max=model.k_max, rounds=model.comp_rounds, theta=model.theta, seed=seed
    )
    return labels, masks


def segment_image(image, params, model, seed=0):
    """Segment one RGB image; returns the feature-resolution label map."""
    labels, _ = segment_graph(image_graph(image, params, model), model, seed)
    return labels


def segment_runs(image, params, model, seeds):
    """Several inference runs of the same image that differ only in their seeds."""
    graph = image_graph(image, params, model)
    return [segment_graph(graph, model, s)[0] for s in seeds]


def predict(scenes, params, model, seed=0):
    return [segment_image(s.frame0, params, model, seed) for s in scenes]


def upsampled(labels, factor):
    return np.kron(labels, np.ones((factor, factor), dtype=labels.dtype))
