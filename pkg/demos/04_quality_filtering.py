"""
Quality filtering
=================

A crop is scored by how stable the student output stays when dropout is
switched on: ten stochastic passes, L2-normalised, and ``2 * sigmoid(-d)``
of their mean pairwise distance. Tracks more than 2.7 MADs below the mean
track score become Unknown.
"""

import numpy as np

from trackcluster.config import RunConfig
from trackcluster.data import SyntheticConfig, generate_synthetic
from trackcluster.pipeline import run_pipeline
from trackcluster.quality import build_report, filter_tracks, quality_threshold

###############################################################################
# The threshold rule by hand: mean 0.624, median 0.70, MAD 0.01.
scores = [0.70, 0.71, 0.72, 0.69, 0.30]
print(quality_threshold(scores))
print(filter_tracks(build_report({i: np.array([s]) for i, s in enumerate(scores)})))

###############################################################################
# Three pure-noise tracks among forty clean ones. After finetuning the noise
# tracks give the least stable embeddings and are filtered.
ds = generate_synthetic(SyntheticConfig(identities=8, tracks_per_identity=5, crops_per_track=6,
                                        dim=32, outlier_tracks=3, seed=1))
cfg = RunConfig.preset("desk")
cfg.train.ssl_iterations = 1
res = run_pipeline(ds, cfg)
noise = sorted(t.track_id for t in ds if t.truth_identity is None)
q = res.quality
print("threshold", round(q.threshold, 4))
print("noise tracks", [(t, round(q.track_scores[t], 4)) for t in noise])
print("filtered", sorted(res.filtered_ids))
