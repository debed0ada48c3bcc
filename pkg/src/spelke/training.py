"""Masked row-wise KL training of the key/query projections, and bootstrapping.

Only the two projection matrices are trained. The loss for a row is
``KL(t || p)`` where ``t`` is the row's masked binary target renormalized to
sum 1 and ``p`` is the softmax affinity restricted to the masked entries and
renormalized, i.e. a softmax over the masked logits. Its gradient with
respect to a masked logit is simply ``p - t``.
"""

import csv
import io as _io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import (
    NumericError,
    ProjectionParams,
    compute_affinities,
    embed,
    extract_features,
    segment_max,
    segment_sum,
)
from .pipeline import ModelConfig, segment_runs, support_for
from .seeding import derive_seed
from .supervision import (
    confident_segments,
    connectivity_targets,
    motion_indicator,
    motion_segments,
)

CHECKPOINT_MAGIC = "# spelke-checkpoint v1"
LOSS_MODES = ("softmax", "normalized")


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    steps: int = 2000
    batch_size: int = 8
    poly_power: float = 0.9
    seed: int = 0
    rounds: int = 3
    optimizer: str = "adam"
    loss_mode: str = "softmax"
    confident_runs: int = 5
    round_steps: tuple = ()
    init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        self.round_steps = tuple(int(s) for s in self.round_steps)

    def steps_for_round(self, round_index):
        if len(self.round_steps) >= round_index:
            return self.round_steps[round_index - 1]
        return self.steps


@dataclass
class Checkpoint:
    params: ProjectionParams
    round: int = 1
    step: int = 0
    loss_history: list = field(default_factory=list)

    def save(self, path):
        Path(path).write_text(dumps_checkpoint(self))

    @classmethod
    def load(cls, path):
        return loads_checkpoint(Path(path).read_text())


def _matrix_text(m):
    buf = _io.StringIO()
    np.savetxt(buf, np.atleast_2d(m), fmt="%.17g")
    return buf.getvalue()


def dumps_checkpoint(ckpt):
    """Text format: header lines, then ``[w_key]``/``[w_query]`` (D rows of F
    values) and ``[loss_history]`` sections. ``%.17g`` round-trips float64."""
    p = ckpt.params
    lines = [
        CHECKPOINT_MAGIC,
        f"embed_dim {p.embed_dim}",
        f"feature_dim {p.feature_dim}",
        f"round {ckpt.round}",
        f"step {ckpt.step}",
        "[w_key]",
        _matrix_text(p.w_key).rstrip("\n"),
        "[w_query]",
        _matrix_text(p.w_query).rstrip("\n"),
        "[loss_history]",
    ]
    lines.extend("%.17g" % v for v in ckpt.loss_history)
    return "\n".join(lines) + "\n"


def loads_checkpoint(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError("not a spelke checkpoint")
    header, sections, current = {}, {}, None
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            key, value = line.split()
            header[key] = int(value)
        else:
            sections[current].append([float(v) for v in line.split()])
    d, f = header["embed_dim"], header["feature_dim"]
    wk = np.array(sections["w_key"], dtype=np.float64).reshape(d, f)
    wq = np.array(sections["w_query"], dtype=np.float64).reshape(d, f)
    losses = [row[0] for row in sections.get("loss_history", [])]
    return Checkpoint(ProjectionParams(wk, wq), header["round"], header["step"], losses)


# ---------------------------------------------------------------- loss


def _masked_log_softmax(logits, mask, support):
    """log p over masked entries of each row (unmasked entries -> -inf)."""
    masked = np.where(mask, logits, -np.inf)
    mx = segment_max(masked, support.indptr)
    safe_mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(masked - safe_mx[support.rows]), 0.0)
    s = segment_sum(e, support.indptr)
    lse = safe_mx + np.log(np.where(s > 0, s, 1.0))
    return np.where(mask, logits - lse[support.rows], -np.inf)


def _row_targets(target, support):
    mask = target.loss_mask.astype(bool)
    t = (target.target.astype(bool) & mask).astype(np.float64)
    tsum = segment_sum(t, support.indptr)
    contributing = tsum > 0
    tnorm = t / np.where(tsum > 0, tsum, 1.0)[support.rows]
    return mask, tnorm, contributing


def _loss_and_logit_grad(logits, support, target, mode="softmax"):
    """Mean row loss and its gradient with respect to every stored logit."""
    mask, t, contributing = _row_targets(target, support)
    n_rows = int(contributing.sum())
    grad = np.zeros_like(logits)
    if n_rows == 0:
        return 0.0, grad
    rows = support.rows
    live = contributing[rows] & mask
    pos = live & (t > 0)
    if mode == "softmax":
        logp = _masked_log_softmax(logits, mask, support)
        terms = np.zeros_like(logits)
        terms[pos] = t[pos] * (np.log(t[pos]) - logp[pos])
        loss = terms.sum() / n_rows
        grad[live] = np.exp(logp[live]) - t[live]
    elif mode == "normalized":
        # KL(t || A) on the max-normalized affinities without renormalization
        mx = segment_max(logits, support.indptr)
        log_a = logits - mx[rows]
        terms = np.zeros_like(logits)
        terms[pos] = t[pos] * (np.log(t[pos]) - log_a[pos])
        loss = terms.sum() / n_rows
        grad[live] = -t[live]
        # d(-log A_j)/dz_k = -1[j == k] + 1[k == row argmax]
        idx = np.flatnonzero(logits == mx[rows])
        _, keep = np.unique(rows[idx], return_index=True)
        first = idx[keep]
        row_t = segment_sum(np.where(live, t, 0.0), support.indptr)
        grad[first] += row_t[rows[first]]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    grad /= n_rows
    return float(loss), grad


def kl_loss(graph, target, mode="softmax"):
    """Masked row-wise KL loss of an affinity graph against a connectivity target."""
    logits = graph.logits
    if logits is None:
        logits = np.log(np.maximum(graph.softmax_affinity, np.finfo(float).tiny))
    loss, _ = _loss_and_logit_grad(logits, graph.support, target, mode)
    return loss


def value_and_gradient(fm, params, support, target, mode="softmax"):
    """Return ``(loss, grad_w_key, grad_w_query)``."""
    graph = compute_affinities(fm, params, support)
    loss, g = _loss_and_logit_grad(graph.logits, support, target, mode)
    flat = fm.reshape(-1, fm.shape[-1])
    keys, queries = embed(fm, params)
    scale = 1.0 / np.sqrt(params.embed_dim)
    if support.density() > 0.25:
        gm = support.to_dense(g)
    else:
        gm = support.to_csr(g)
    d_keys = np.asarray(gm @ queries) * scale
    d_queries = np.asarray(gm.T @ keys) * scale
    return loss, d_keys.T @ flat, d_queries.T @ flat


def loss_gradient(fm, params, support, target, mode="softmax"):
    _, gk, gq = value_and_gradient(fm, params, support, target, mode)
    return gk, gq


# ---------------------------------------------------------------- data


@dataclass
class Example:
    features: np.ndarray
    motion: np.ndarray
    indicator: np.ndarray
    teacher: np.ndarray = None
    target: object = None


def motion_maps(flow, model, seed):
    """Motion segments and the thresholded motion indicator at feature resolution."""
    h, w = flow.shape[:2]
    dims = (h // model.downsample, w // model.downsample)
    sm = motion_segments(
        flow, q=model.q_dim, seed=seed, target_dims=dims, k_max=model.k_max,
        rounds=model.comp_rounds, theta=model.theta,
    )
    return sm, motion_indicator(flow, model.tau, dims)


def teacher_segments(image, params, model, seed, runs=5):
    seeds = [derive_seed(seed, "run", l) for l in range(runs)]
    outputs = segment_runs(image, params, model, seeds)
    support = support_for(outputs[0].shape[0], outputs[0].shape[1], model)
    return confident_segments(
        outputs, q=model.q_dim, seed=derive_seed(seed, "meta"), support=support,
        kprop_iters=model.kprop_iters, k_max=model.k_max, rounds=model.comp_rounds,
        theta=model.theta,
    )


def prepare_examples(scenes, model, cfg, teacher=None, cache=None):
    """Features, motion maps and connectivity targets for every scene.

    *cache* (a dict) memoizes the teacher-independent parts across rounds.
    """
    cache = {} if cache is None else cache
    examples = []
    for i, scene in enumerate(scenes):
        if i not in cache:
            fm = extract_features(scene.frame0, model.downsample)
            sm, ind = motion_maps(scene.flow, model, derive_seed(cfg.seed, "motion", i))
            cache[i] = (fm, sm, ind)
        fm, sm, ind = cache[i]
        support = support_for(fm.shape[0], fm.shape[1], model)
        tmap = None
        if teacher is not None:
            tmap = teacher_segments(
                scene.frame0, teacher.params, model,
                derive_seed(cfg.seed, "teacher", teacher.round, i), cfg.confident_runs,
            )
        target = connectivity_targets(sm, ind, tmap, support)
        examples.append(Example(fm, sm, ind, tmap, target))
    return examples


# ---------------------------------------------------------------- optimizer


def poly_lr(base, step, steps, power):
    return base * (1.0 - step / float(steps)) ** power


class _Adam:
    def __init__(self, shapes, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def update(self, grads, lr):
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def initial_params(cfg, model):
    return ProjectionParams.random(
        model.embed_dim, seed=derive_seed(cfg.seed, "init"), scale=cfg.init_scale
    )


def train_examples(examples, cfg, model, init=None, round_index=1, steps=None, log=None):
    """Gradient loop over prepared examples; returns a :class:`Checkpoint`."""
    if not examples:
        raise TrainingError("empty dataset")
    steps = cfg.steps if steps is None else steps
    params = (init.copy() if init is not None else initial_params(cfg, model))
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches", round_index))
    adam = _Adam([params.w_key.shape, params.w_query.shape])
    history = []
    n = len(examples)
    bs = min(cfg.batch_size, n)
    for step in range(steps):
        batch = rng.choice(n, size=bs, replace=False)
        loss, gk, gq = 0.0, np.zeros_like(params.w_key), np.zeros_like(params.w_query)
        for j in batch:  # fixed order keeps the reduction deterministic
            ex = examples[j]
            support = support_for(ex.features.shape[0], ex.features.shape[1], model)
            try:
                li, gki, gqi = value_and_gradient(
                    ex.features, params, support, ex.target, cfg.loss_mode
                )
            except NumericError as exc:
                raise TrainingError(f"step {step}: {exc}", step=step) from exc
            loss += li
            gk += gki
            gq += gqi
        loss /= bs
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        gk /= bs
        gq /= bs
        lr = poly_lr(cfg.learning_rate, step, steps, cfg.poly_power)
        if cfg.optimizer == "adam":
            dk, dq = adam.update([gk, gq], lr)
        else:
            dk, dq = lr * gk, lr * gq
        if lr != 0.0:
            params = ProjectionParams(params.w_key - dk, params.w_query - dq)
        history.append(float(loss))
        if log is not None:
            log(round_index, step, loss)
    return Checkpoint(params, round_index, steps, history)


def train(scenes, cfg, model=None, teacher=None, init=None, round_index=1, cache=None, log=None):
    model = model or ModelConfig()
    examples = prepare_examples(scenes, model, cfg, teacher, cache)
    steps = cfg.steps_for_round(round_index)
    return train_examples(examples, cfg, model, init, round_index, steps, log)


def bootstrap(scenes, cfg, model=None, log=None, on_round=None):
    """Teacher-student rounds; returns one checkpoint per round."""
    if cfg.rounds < 1:
        raise ValueError("rounds must be >= 1")
    model = model or ModelConfig()
    cache = {}
    ckpts = []
    teacher = None
    for r in range(1, cfg.rounds + 1):
        init = None if teacher is None else teacher.params
        ckpt = train(scenes, cfg, model, teacher, init, r, cache, log)
        ckpts.append(ckpt)
        if on_round is not None:
            on_round(ckpt)
        # freeze: the next round only ever reads a copy
        teacher = replace(ckpt, params=ckpt.params.copy())
    return ckpts


def write_loss_csv(path, ckpt):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "step", "loss"])
        for i, v in enumerate(ckpt.loss_history):
            w.writerow([ckpt.round, i, "%.10g" % v])
