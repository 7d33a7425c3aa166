"""End-to-end runs: iterative finetuning, quality filtering, coarse matching, clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set

import numpy as np

from .clustering import ClusterRun, cluster_tracks, hac_baseline
from .coarse import coarse_matches
from .config import RunConfig
from .data import ClusterAssignment, Track, TrackDataset
from .evaluation import Method
from .finetune import MatchTable, train_iteration
from .quality import QualityReport, estimate_quality, filter_tracks
from .tinynn import ModelState, forward

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineResult:
    model: ModelState
    matches: MatchTable
    quality: QualityReport
    filtered_ids: Set[int]
    log: List[dict] = field(default_factory=list)
    iterations: List[dict] = field(default_factory=list)


def init_model(dim: int, cfg: RunConfig, rng: np.random.Generator) -> ModelState:
    m = cfg.model
    return ModelState.create(dim, m.hidden_mult * dim, rng, teacher_temp=m.teacher_temp,
                             student_temp=m.student_temp, ema_momentum=m.ema_momentum,
                             center_momentum=m.center_momentum, dropout_p=m.dropout_p)


def student_embeddings(model: ModelState, tracks: Sequence[Track]):
    return [(t.track_id, forward(model.student, t.crops)[0]) for t in tracks]


def run_pipeline(ds: TrackDataset, cfg: RunConfig) -> PipelineResult:
    """Alternate finetuning, quality filtering and coarse matching ``ssl_iterations`` times."""
    cfg.train.validate()
    seed = cfg.train.seed
    ss = np.random.SeedSequence(seed)
    init_ss, *iter_ss = ss.spawn(1 + cfg.train.ssl_iterations)
    state = init_model(ds.dim, cfg, np.random.default_rng(init_ss))
    kept: List[Track] = list(ds.tracks)
    matches: Optional[MatchTable] = None
    records: List[dict] = []
    iters = []
    report = None
    for i in range(1, cfg.train.ssl_iterations + 1):
        state = train_iteration(state, kept, matches, cfg.train, i, cfg.aug,
                                np.random.default_rng(iter_ss[i - 1]), records)
        report = estimate_quality(state, ds.tracks, cfg.quality.passes, (seed, i),
                                  cfg.quality.mad_factor)
        kept_ids, unknown = filter_tracks(report)
        if not kept_ids:
            raise PipelineError(f"iteration {i}: every track was filtered as low quality")
        kept = ds.subset(kept_ids)
        matches = coarse_matches(student_embeddings(state, kept), cfg.coarse.shrinkage,
                                 cfg.coarse.eps, cfg.coarse.fraction, cfg.threads)
        n_links = sum(len(v) for v in matches.values())
        iters.append({"iteration": i, "filtered": unknown, "match_links": n_links})
        log.info("iteration %d: %d filtered, %d coarse match links", i, len(unknown), n_links)
    return PipelineResult(state, matches, report, set(report.filtered_ids), records, iters)


def cluster_with_model(ds: TrackDataset, model: Optional[ModelState], filtered: Set[int],
                       kind: str = "loss_metric", threads: int = 1) -> ClusterRun:
    kept = [t for t in ds.tracks if t.track_id not in filtered]
    return cluster_tracks(kept, model, kind, filtered, threads)


def track_means(model: Optional[ModelState], tracks: Sequence[Track]) -> np.ndarray:
    if model is None:
        return np.stack([t.crops.mean(axis=0) for t in tracks])
    return np.stack([forward(model.student, t.crops)[0].mean(axis=0) for t in tracks])


def hac_assignment(ds: TrackDataset, model: Optional[ModelState], filtered: Set[int],
                   cutoff: float) -> ClusterAssignment:
    kept = [t for t in ds.tracks if t.track_id not in filtered]
    assign = hac_baseline([t.track_id for t in kept], track_means(model, kept), cutoff)
    assign.update({tid: -1 for tid in filtered})
    return assign


METHOD_NAMES = ("loss", "cosine", "euclidean", "hac", "hac-raw")
_KIND = {"loss": "loss_metric", "cosine": "cosine", "euclidean": "euclidean"}


def build_methods(ds: TrackDataset, result: PipelineResult, names: Sequence[str],
                  hac_cutoff: Optional[float] = None, threads: int = 1) -> List[Method]:
    """Comparison methods sharing one finetuned model.

    ``hac`` clusters finetuned track means; ``hac-raw`` clusters the raw
    (non-finetuned) feature means of all tracks.
    """
    methods = []
    for name in names:
        if name in _KIND:
            kind = _KIND[name]
            methods.append(Method("ours", kind, lambda k=kind: cluster_with_model(
                ds, result.model, result.filtered_ids, k, threads).assignment))
        elif name in ("hac", "hac-raw"):
            if hac_cutoff is None:
                raise ValueError("hac methods need a cutoff")
            if name == "hac":
                methods.append(Method("hac", "cosine", lambda: hac_assignment(
                    ds, result.model, result.filtered_ids, hac_cutoff)))
            else:
                methods.append(Method("hac-raw", "cosine", lambda: hac_assignment(
                    ds, None, set(), hac_cutoff)))
        else:
            raise ValueError(f"unknown method {name!r}")
    return methods
