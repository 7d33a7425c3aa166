"""Track quality from embedding stability under dropout, and MAD filtering."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from .data import Track
from .tinynn import ModelState, forward

MAD_FACTOR = 2.7


def crop_quality(model: ModelState, x, passes: int = 10, rng=None) -> float:
    """``2 * sigmoid(-d)`` where ``d`` is the mean pairwise distance between
    L2-normalised student outputs from ``passes`` dropout forward passes.
    """
    return float(crop_qualities(model, np.atleast_2d(x), passes, [rng])[0])


def crop_qualities(model: ModelState, X, passes: int, rngs) -> np.ndarray:
    if passes < 2:
        raise ValueError("need at least two stochastic passes")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    scores = np.empty(X.shape[0])
    for i, (x, rng) in enumerate(zip(X, rngs)):
        batch = np.repeat(x[None], passes, axis=0)
        out, _ = forward(model.student, batch, dropout_p=model.dropout_p, rng=rng)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.maximum(norms, 1e-12)
        d = pdist(out).mean()
        scores[i] = 2.0 / (1.0 + np.exp(d))
    return scores


def track_quality(crop_scores: Sequence[float]) -> float:
    if len(crop_scores) == 0:
        raise ValueError("track has no crop scores")
    return float(np.mean(crop_scores))


def quality_threshold(tqs_values: Sequence[float], factor: float = MAD_FACTOR) -> float:
    """``mean(tqs) - factor * median(|tqs - median(tqs)|)``."""
    v = np.asarray(tqs_values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no track scores")
    mad = np.median(np.abs(v - np.median(v)))
    # shifted mean: exact when all values are equal, so nothing gets filtered then
    lo = v.min()
    return float(lo + (v - lo).mean() - factor * mad)


@dataclass
class QualityReport:
    crop_scores: Dict[int, np.ndarray]
    track_scores: Dict[int, float]
    threshold: float
    filtered_ids: Set[int] = field(default_factory=set)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["track_id", "tqs", "filtered"])
            for tid in sorted(self.track_scores):
                w.writerow([tid, repr(self.track_scores[tid]), int(tid in self.filtered_ids)])


def build_report(crop_scores: Dict[int, np.ndarray], factor: float = MAD_FACTOR) -> QualityReport:
    tqs = {tid: track_quality(s) for tid, s in crop_scores.items()}
    thr = quality_threshold(list(tqs.values()), factor)
    filtered = {tid for tid, q in tqs.items() if q < thr}
    return QualityReport(crop_scores, tqs, thr, filtered)


def estimate_quality(model: ModelState, tracks: Sequence[Track], passes: int = 10,
                     seed=0, factor: float = MAD_FACTOR) -> QualityReport:
    """Score every crop of every track; each crop draws its dropout masks from
    its own stream seeded by ``(*seed, track_id, crop_index)``.
    """
    key = [int(s) for s in np.atleast_1d(seed)]
    crop_scores = {}
    for t in tracks:
        rngs = [np.random.default_rng(key + [t.track_id, i]) for i in range(t.n_crops)]
        crop_scores[t.track_id] = crop_qualities(model, t.crops, passes, rngs)
    return build_report(crop_scores, factor)


def filter_tracks(report: QualityReport) -> Tuple[List[int], List[int]]:
    """Split ids into (kept, unknown); unknown tracks score strictly below the threshold."""
    kept = sorted(t for t in report.track_scores if t not in report.filtered_ids)
    return kept, sorted(report.filtered_ids)
