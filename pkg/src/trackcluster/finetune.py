"""Self-distillation finetuning on positive crop pairs.

The teacher output is centered and sharpened, the student output softened,
and their cross-entropy is minimised through the student branch only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .config import AugConfig, TrainConfig
from .data import Track
from .tinynn import (HEAD_KEYS, PARAM_ORDER, AdamW, ModelState, backward, ema_update,
                     forward, log_softmax, lr_at, softmax)

MatchTable = Dict[int, Set[int]]
Pair = Tuple[int, int, int, int]

N_GLOBAL = 2
N_LOCAL = 4


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def ssl_loss(embed_t, embed_s, c, teacher_temp: float, student_temp: float):
    """Cross-entropy between the centered teacher softmax and the student softmax.

    Works on single vectors or on matching batches (last axis = embedding).
    """
    p = softmax(np.asarray(embed_t, dtype=np.float64) - c, teacher_temp)
    logq = log_softmax(embed_s, student_temp)
    loss = -np.sum(p * logq, axis=-1)
    return float(loss) if np.ndim(loss) == 0 else loss


def update_center(c, teacher_batch, momentum: float):
    if not 0.0 <= momentum < 1.0:
        raise ValueError("center momentum must lie in [0, 1)")
    batch = np.atleast_2d(np.asarray(teacher_batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty teacher batch")
    return momentum * np.asarray(c, dtype=np.float64) + (1.0 - momentum) * batch.mean(axis=0)


@dataclass
class ViewGroups:
    global_views: np.ndarray  # (2, D): one view of a, one of b
    local_views: np.ndarray   # (4, D): two views of a, two of b

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.global_views, self.local_views], axis=0)


def make_view(x, scale: float, aug: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Vector analogue of a random resized crop plus flip/colour jitter.

    A wrapped window of ``ceil(scale * D)`` coordinates is kept and rescaled by
    ``1/sqrt(scale)``, the rest zeroed; Gaussian jitter is added and, with
    probability ``flip_prob``, a random half of the coordinates is negated.
    """
    x = np.asarray(x, dtype=np.float64)
    D = x.shape[0]
    keep = min(D, math.ceil(scale * D - 1e-9))
    offset = int(rng.integers(D))
    idx = (offset + np.arange(keep)) % D
    view = np.zeros(D)
    view[idx] = x[idx] / math.sqrt(scale)
    if aug.jitter > 0:
        view += aug.jitter * rng.standard_normal(D)
    if rng.random() < aug.flip_prob:
        flip = rng.choice(D, size=D // 2, replace=False)
        view[flip] = -view[flip]
    return view


def make_views(a, b, aug: AugConfig, rng: np.random.Generator) -> ViewGroups:
    if len(a) < 4 or len(b) < 4:
        raise ValueError("views need vectors of dimension >= 4")
    g_lo, g_hi = aug.global_scale
    l_lo, l_hi = aug.local_scale
    glob = [make_view(x, rng.uniform(g_lo, g_hi), aug, rng) for x in (a, b)]
    loc = [make_view(x, rng.uniform(l_lo, l_hi), aug, rng) for x in (a, a, b, b)]
    return ViewGroups(np.stack(glob), np.stack(loc))


def _group_terms(P, logQ, Q, idx, student_temp):
    """Mean ordered-pair cross-entropy inside one view group and its dL/dS."""
    k = len(idx)
    Pg, Lg, Qg = P[:, idx], logQ[:, idx], Q[:, idx]
    ce = -np.einsum("bti,bsi->bts", Pg, Lg)
    off = ~np.eye(k, dtype=bool)
    loss = ce[:, off].sum(axis=1) / (k * (k - 1))
    # sum over teacher views t != s of (q_s - p_t)
    psum = Pg.sum(axis=1, keepdims=True) - Pg
    grad = ((k - 1) * Qg - psum) / (student_temp * k * (k - 1))
    return loss, grad


def batch_pair_loss(model: ModelState, views, student=None, with_grad: bool = True):
    """Loss over a batch of view groups shaped (B, 6, D).

    Returns ``(loss, grads, teacher_out)``: the batch-mean pair loss, student
    gradients (``None`` if ``with_grad`` is false) and the raw teacher outputs.
    The teacher is a constant; no gradient reaches it.
    """
    student = model.student if student is None else student
    V = np.asarray(views, dtype=np.float64)
    B, n_views, D = V.shape
    flat = V.reshape(B * n_views, D)
    T, _ = forward(model.teacher, flat)
    S, cache = forward(student, flat)
    T = T.reshape(B, n_views, D)
    P = softmax(T - model.center, model.teacher_temp)
    logQ = log_softmax(S.reshape(B, n_views, D), model.student_temp)
    Q = np.exp(logQ)
    gl, gg = _group_terms(P, logQ, Q, [0, 1], model.student_temp)
    ll, lg = _group_terms(P, logQ, Q, [2, 3, 4, 5], model.student_temp)
    loss = float(np.mean(0.5 * (gl + ll)))
    if not with_grad:
        return loss, None, T
    dS = np.concatenate([gg, lg], axis=1) * (0.5 / B)
    grads = backward(student, cache, dS.reshape(B * n_views, D))
    return loss, grads, T


def pair_loss(model: ModelState, views: ViewGroups) -> float:
    """Average of the global-group and local-group mean ordered-pair losses."""
    loss, _, _ = batch_pair_loss(model, views.stacked()[None], with_grad=False)
    return loss


def sample_pairs(tracks: Sequence[Track], matches: Optional[MatchTable],
                 rng: np.random.Generator) -> List[Pair]:
    """One positive partner for every crop of every track.

    The partner comes from a uniformly drawn coarse match when the track has
    any, otherwise from a different crop of the same track.
    """
    by_id = {t.track_id: t for t in tracks}
    pairs = []
    for t in tracks:
        partners = sorted(m for m in (matches or {}).get(t.track_id, ()) if m in by_id
                          and m != t.track_id)
        n = t.n_crops
        for i in range(n):
            if partners:
                other = by_id[partners[int(rng.integers(len(partners)))]]
                pairs.append((t.track_id, i, other.track_id, int(rng.integers(other.n_crops))))
            elif n == 1:
                pairs.append((t.track_id, 0, t.track_id, 0))
            else:
                j = int(rng.integers(n - 1))
                pairs.append((t.track_id, i, t.track_id, j + (j >= i)))
    return pairs


def train_iteration(state: ModelState, tracks: Sequence[Track], matches: Optional[MatchTable],
                    cfg: TrainConfig, iter_index: int, aug: AugConfig,
                    rng: np.random.Generator, log: Optional[list] = None) -> ModelState:
    """One finetuning iteration; returns a new state.

    Iteration 1 runs ``epochs_first`` epochs with the adapter frozen for the
    first ``head_only_epochs``; later iterations run ``epochs_later`` epochs on
    all parameters. The teacher follows the student by EMA once per epoch and
    the center is updated after every batch.
    """
    if iter_index < 1:
        raise ValueError("iter_index starts at 1")
    state = state.copy()
    epochs = cfg.epochs_first if iter_index == 1 else cfg.epochs_later
    head_only = cfg.head_only_epochs if iter_index == 1 else 0
    opt = AdamW(tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    by_id = {t.track_id: t for t in tracks}
    D = state.dim
    for epoch in range(1, epochs + 1):
        lr = lr_at(cfg, epoch, epochs)
        keys = HEAD_KEYS if epoch <= head_only else PARAM_ORDER
        pairs = sample_pairs(tracks, matches, rng)
        order = rng.permutation(len(pairs))
        losses, variances = [], []
        for bi, start in enumerate(range(0, len(pairs), cfg.batch_size)):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            V = np.stack([make_views(by_id[ta].crops[ia], by_id[tb].crops[ib], aug, rng).stacked()
                          for ta, ia, tb, ib in batch])
            loss, grads, T = batch_pair_loss(state, V)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss (iteration {iter_index}, epoch {epoch}, batch {bi})")
            opt.step(state.student, grads, lr, keys)
            flat_t = T.reshape(-1, D)
            state.center = update_center(state.center, flat_t, state.center_momentum)
            losses.append(loss)
            variances.append(float(flat_t.var(axis=0).mean()))
        state.teacher = ema_update(state.teacher, state.student, state.ema_momentum)
        if log is not None:
            log.append({"iteration": iter_index, "epoch": epoch, "lr": lr,
                        "mean_loss": float(np.mean(losses)),
                        "teacher_variance": float(np.min(variances))})
    return state


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=False) + "\n")
