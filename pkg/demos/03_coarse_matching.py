"""
Coarse track matching
=====================

Each track gets a Gaussian over its crop embeddings, with the covariance
shrunk toward a scaled identity so it stays invertible with few crops. A
track matches another when its mean is at least as likely as the lowest
quarter of the other track's own crops.
"""

import numpy as np

from trackcluster.coarse import coarse_matches, fit_track_gaussian, log_pdf, track_match_threshold
from trackcluster.data import SyntheticConfig, generate_synthetic

###############################################################################
# The density of a standard bivariate normal at its mean is 1/(2 pi).
g = fit_track_gaussian(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]) * 2 ** 0.5,
                       shrinkage=0.0, eps=0.0)
print(log_pdf(g, [0.0, 0.0]), -np.log(2 * np.pi))

###############################################################################
# A track's own mean always clears its own threshold.
X = np.random.default_rng(1).standard_normal((6, 4))
g = fit_track_gaussian(X)
print(track_match_threshold(g, X).threshold_logpdf, "<=", log_pdf(g, g.mean))

###############################################################################
# With tight tracks, matches only join tracks of the same identity. They are
# directional: a broad track can accept a tight one without the reverse.
ds = generate_synthetic(SyntheticConfig(identities=4, tracks_per_identity=4, crops_per_track=8,
                                        dim=4, track_shift=0.02, crop_noise=0.1, seed=5))
matches = coarse_matches([(t.track_id, t.crops) for t in ds])
truth = ds.truth()
links = [(j, k) for j, ks in matches.items() for k in sorted(ks)]
print(len(links), "links, all same identity:", all(truth[j] == truth[k] for j, k in links))
