"""Parameter-free agglomerative track clustering with per-track thresholds.

Each kept track gets a threshold: the mean similarity over its within-track
crop pairs. Round 1 compares tracks by the mean over all cross-track crop
pairs; a pair is a positive match when that mean is below either track's
threshold, and positive pairs are linked transitively. Later rounds represent
a cluster by its member tracks' mean embeddings and recompute thresholds for
merged clusters. The loop stops once a round leaves the cluster count
unchanged. Lower similarity values always mean a better match.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .data import UNKNOWN, ClusterAssignment, Track, assignment_from_groups
from .tinynn import ModelState, forward, log_softmax, softmax

KINDS = ("loss_metric", "cosine", "euclidean")
_CHUNK = 256


class UnionFind:
    def __init__(self, ids: Iterable[int]):
        self.parent = {i: i for i in ids}

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so the representative is the smallest member
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> List[List[int]]:
        out: Dict[int, List[int]] = {}
        for i in sorted(self.parent):
            out.setdefault(self.find(i), []).append(i)
        return [out[r] for r in sorted(out)]


def link_merges(positive_pairs: Iterable[Tuple[int, int]], ids: Iterable[int]) -> List[List[int]]:
    """Connected components of the positive-pair graph, each sorted, ordered by smallest member."""
    uf = UnionFind(ids)
    for a, b in positive_pairs:
        if a not in uf.parent or b not in uf.parent:
            raise KeyError(f"unknown id in pair ({a}, {b})")
        uf.union(a, b)
    return uf.groups()


@dataclass
class Embeddings:
    """Raw branch outputs for a set of crops (or track means)."""

    student: np.ndarray
    teacher: Optional[np.ndarray] = None

    def mean(self) -> "Embeddings":
        t = None if self.teacher is None else self.teacher.mean(axis=0, keepdims=True)
        return Embeddings(self.student.mean(axis=0, keepdims=True), t)

    def __len__(self) -> int:
        return self.student.shape[0]


def embed(model: Optional[ModelState], X, kind: str) -> Embeddings:
    """Student (and for the loss metric, teacher) outputs of raw features ``X``.

    Without a model, cosine/euclidean act on the raw features directly.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown similarity kind {kind!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model is None:
        if kind == "loss_metric":
            raise ValueError("loss_metric similarity requires a model")
        return Embeddings(X)
    S, _ = forward(model.student, X)
    T = forward(model.teacher, X)[0] if kind == "loss_metric" else None
    return Embeddings(S, T)


def _block(model, kind, A: Embeddings, B: Embeddings) -> np.ndarray:
    if kind == "loss_metric":
        pa = softmax(A.teacher - model.center, model.teacher_temp)
        pb = softmax(B.teacher - model.center, model.teacher_temp)
        la = log_softmax(A.student, model.student_temp)
        lb = log_softmax(B.student, model.student_temp)
        ab = -(pa[:, None, :] * lb[None, :, :]).sum(axis=-1)
        ba = -(pb[None, :, :] * la[:, None, :]).sum(axis=-1)
        return 0.5 * (ab + ba)
    if kind == "cosine":
        a, b = A.student, B.student
        na = np.sqrt((a * a).sum(axis=-1))
        nb = np.sqrt((b * b).sum(axis=-1))
        dots = (a[:, None, :] * b[None, :, :]).sum(axis=-1)
        return 1.0 - dots / (na[:, None] * nb[None, :])
    diff = A.student[:, None, :] - B.student[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def pairwise(model: Optional[ModelState], kind: str, A: Embeddings, B: Embeddings,
             threads: int = 1) -> np.ndarray:
    """Similarity matrix between two embedding sets.

    Every entry is reduced independently of the chunking, so the result is
    bit-identical for any ``threads``.
    """
    if kind == "loss_metric" and model is None:
        raise ValueError("loss_metric similarity requires a model")
    starts = list(range(0, len(A), _CHUNK))

    def rows(s):
        sl = slice(s, s + _CHUNK)
        sub = Embeddings(A.student[sl], None if A.teacher is None else A.teacher[sl])
        return _block(model, kind, sub, B)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(rows, starts))
    else:
        parts = [rows(s) for s in starts]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, len(B)))


def pair_similarity(model: Optional[ModelState], a, b, kind: str = "loss_metric") -> float:
    """Symmetrised similarity of two raw feature vectors (lower = closer).

    For the loss metric each vector takes a turn through the teacher while
    the other goes through the student, and the two losses are averaged.
    """
    return float(pairwise(model, kind, embed(model, a, kind), embed(model, b, kind))[0, 0])


def _upper_mean(M: np.ndarray) -> float:
    iu = np.triu_indices(M.shape[0], k=1)
    return float(M[iu].mean())


def track_threshold(model: Optional[ModelState], crops, kind: str = "loss_metric") -> float:
    """Mean similarity over all unordered within-track crop pairs."""
    E = embed(model, crops, kind)
    if len(E) < 2:
        raise ValueError("a track threshold needs at least two crops")
    return _upper_mean(pairwise(model, kind, E, E))


@dataclass
class ClusterRun:
    assignment: ClusterAssignment
    rounds: int
    cluster_counts: List[int]
    merges_per_round: List[int]
    thresholds: Dict[int, float]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "rounds": self.rounds,
            "cluster_counts": self.cluster_counts,
            "merges_per_round": self.merges_per_round,
            "thresholds": {str(k): self.thresholds[k] for k in sorted(self.thresholds)},
        }, indent=1)


def _sub(E: Embeddings, sl) -> Embeddings:
    return Embeddings(E.student[sl], None if E.teacher is None else E.teacher[sl])


def _concat(parts: Sequence[Embeddings]) -> Embeddings:
    s = np.concatenate([p.student for p in parts])
    t = None if parts[0].teacher is None else np.concatenate([p.teacher for p in parts])
    return Embeddings(s, t)


def _candidates(sim: np.ndarray, thr: np.ndarray) -> List[Tuple[int, int]]:
    n = sim.shape[0]
    pairs = []
    for j in range(n):
        for k in range(j + 1, n):
            if sim[j, k] < thr[j] or sim[j, k] < thr[k]:
                pairs.append((j, k))
    return pairs


def cluster_tracks(tracks: Sequence[Track], model: Optional[ModelState],
                   kind: str = "loss_metric", unknown_ids: Iterable[int] = (),
                   threads: int = 1) -> ClusterRun:
    """Cluster the kept ``tracks``; ``unknown_ids`` are appended with id -1."""
    unknown_ids = sorted(unknown_ids)
    if not tracks:
        assign = {tid: UNKNOWN for tid in unknown_ids}
        return ClusterRun(assign, 0, [], [], {})
    tracks = sorted(tracks, key=lambda t: t.track_id)
    ids = [t.track_id for t in tracks]
    n = len(tracks)
    per_track = [embed(model, t.crops, kind) for t in tracks]
    sizes = [len(e) for e in per_track]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    allE = _concat(per_track)
    M = pairwise(model, kind, allE, allE, threads)

    thr = np.full(n, np.nan)
    for j in range(n):
        if sizes[j] >= 2:
            sl = slice(offsets[j], offsets[j + 1])
            thr[j] = _upper_mean(M[sl, sl])
    multi = thr[~np.isnan(thr)]
    # singleton-crop tracks borrow the median multi-crop threshold
    thr[np.isnan(thr)] = np.median(multi) if multi.size else -np.inf
    track_thr = {ids[j]: float(thr[j]) for j in range(n)}

    sim = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            block = M[offsets[j]:offsets[j + 1], offsets[k]:offsets[k + 1]]
            sim[j, k] = sim[k, j] = block.mean()
    pairs = _candidates(sim, thr)
    groups = link_merges(pairs, range(n))
    counts = [len(groups)]
    merges = [len(pairs)]
    rounds = 1
    prev = n

    if len(groups) != prev:
        means = _concat([e.mean() for e in per_track])
        Mt = pairwise(model, kind, means, means, threads)
        while True:
            prev = len(groups)
            g = len(groups)
            cthr = np.empty(g)
            for a, members in enumerate(groups):
                if len(members) == 1:
                    cthr[a] = thr[members[0]]
                else:
                    cthr[a] = _upper_mean(Mt[np.ix_(members, members)])
            csim = np.zeros((g, g))
            for a in range(g):
                for b in range(a + 1, g):
                    csim[a, b] = csim[b, a] = Mt[np.ix_(groups[a], groups[b])].mean()
            cpairs = _candidates(csim, cthr)
            merged = link_merges(cpairs, range(g))
            groups = [sorted(m for c in comp for m in groups[c]) for comp in merged]
            groups.sort(key=lambda m: m[0])
            rounds += 1
            counts.append(len(groups))
            merges.append(len(cpairs))
            if len(groups) == prev:
                break

    assign = assignment_from_groups([[ids[j] for j in grp] for grp in groups], unknown_ids)
    return ClusterRun(assign, rounds, counts, merges, track_thr)


def hac_baseline(track_ids: Sequence[int], track_means, cutoff: float,
                 metric: str = "cosine") -> ClusterAssignment:
    """Average-linkage HAC over track mean embeddings, merging while linkage < cutoff."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    X = np.atleast_2d(np.asarray(track_means, dtype=np.float64))
    ids = [int(t) for t in track_ids]
    if len(ids) == 1:
        return {ids[0]: 1}
    Z = linkage(X, method="average", metric=metric)
    labels = fcluster(Z, t=np.nextafter(cutoff, -np.inf), criterion="distance")
    groups: Dict[int, List[int]] = {}
    for tid, lab in zip(ids, labels):
        groups.setdefault(int(lab), []).append(tid)
    return assignment_from_groups(sorted(groups.values(), key=min))
