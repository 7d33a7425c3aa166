"""Coarse track matching with per-track Gaussian densities.

Every track gets a shrunk-covariance Gaussian over its crop embeddings and a
log-density threshold (mean of its lowest-quartile crop log-densities). Track
``k`` matches track ``j`` when ``k``'s mean embedding scores at least ``j``'s
threshold under ``j``'s Gaussian.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Set, Tuple

import numpy as np
from scipy.linalg import solve_triangular

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrackGaussian:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    log_norm: float

    @property
    def d(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class MatchThreshold:
    track_id: int
    threshold_logpdf: float


def fit_track_gaussian(crop_embeds, shrinkage: float = 0.2, eps: float = 1e-6) -> TrackGaussian:
    """Sample mean and covariance shrunk toward ``(tr(S)/D + eps) I``.

    ``S`` is the biased sample covariance. Any ``shrinkage > 0`` keeps the
    covariance positive definite whatever the crop count.
    """
    X = np.atleast_2d(np.asarray(crop_embeds, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one embedding")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    n, D = X.shape
    mu = X.mean(axis=0)
    R = X - mu
    S = R.T @ R / n
    cov = (1.0 - shrinkage) * S + shrinkage * (np.trace(S) / D + eps) * np.eye(D)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"covariance not positive definite (shrinkage={shrinkage}); increase shrinkage") from exc
    log_det = 2.0 * np.sum(np.log(np.diag(L)))
    return TrackGaussian(mu, cov, L, -0.5 * (D * _LOG_2PI + log_det))


def log_pdf(g: TrackGaussian, x):
    """Log density of ``x`` (vector or batch of rows) via a Cholesky solve."""
    x = np.asarray(x, dtype=np.float64)
    R = np.atleast_2d(x) - g.mean
    z = solve_triangular(g.chol, R.T, lower=True)
    out = g.log_norm - 0.5 * np.sum(z * z, axis=0)
    return float(out[0]) if x.ndim == 1 else out


def threshold_from_logpdfs(values, fraction: float = 0.25) -> float:
    """Mean of the lowest ``ceil(fraction * n)`` values (at least one)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(fraction * len(v) - 1e-12))
    return float(v[:k].mean())


def track_match_threshold(g: TrackGaussian, crop_embeds, fraction: float = 0.25,
                          track_id: int = -1) -> MatchThreshold:
    vals = np.atleast_1d(log_pdf(g, np.atleast_2d(crop_embeds)))
    return MatchThreshold(track_id, threshold_from_logpdfs(vals, fraction))


def coarse_matches(tracks: Sequence[Tuple[int, np.ndarray]], shrinkage: float = 0.2,
                   eps: float = 1e-6, fraction: float = 0.25,
                   threads: int = 1) -> Dict[int, Set[int]]:
    """Directional match table ``track_id -> {matched track ids}``.

    ``tracks`` pairs each id with its (n, D) crop embeddings. Rows are computed
    independently and gathered in input order, so ``threads`` never changes
    the result.
    """
    ids = [int(t) for t, _ in tracks]
    embeds = [np.atleast_2d(np.asarray(e, dtype=np.float64)) for _, e in tracks]
    means = np.stack([e.mean(axis=0) for e in embeds])

    def row(j):
        g = fit_track_gaussian(embeds[j], shrinkage, eps)
        thr = track_match_threshold(g, embeds[j], fraction).threshold_logpdf
        scores = log_pdf(g, means)
        return {ids[k] for k in range(len(ids)) if k != j and scores[k] >= thr}

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(row, range(len(ids))))
    else:
        rows = [row(j) for j in range(len(ids))]
    return dict(zip(ids, rows))


def save_matches(matches: Dict[int, Set[int]], path) -> None:
    data = {str(k): sorted(int(x) for x in matches[k]) for k in sorted(matches)}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_matches(path) -> Dict[int, Set[int]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(k): set(v) for k, v in data.items()}
