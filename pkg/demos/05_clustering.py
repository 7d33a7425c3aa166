"""
Threshold-free track clustering
===============================

Every track sets its own threshold from its within-track similarities. Two
tracks are linked when their cross similarity falls below either threshold,
links are closed transitively, and later rounds repeat this on track means
until the number of clusters stops changing.
"""

import numpy as np

from trackcluster.clustering import cluster_tracks, hac_baseline
from trackcluster.data import Track

###############################################################################
# A chain: crops two apart in every track, tracks one apart. 1-2 and 2-3
# are links, 1-3 is not, and linking still puts all three together.
tracks = [Track(t, 0, np.array([[t - 1.0, 0.0], [t + 1.0, 0.0]])) for t in (1, 2, 3)]
run = cluster_tracks(tracks, None, "euclidean")
print(run.assignment, run.cluster_counts, run.thresholds)

###############################################################################
# Far-apart tracks stay apart and the loop stops after the first round;
# Unknown tracks are carried through with id -1.
tracks = [Track(i, 0, np.array([[10.0 * i, 0.0], [10.0 * i, 0.2]])) for i in range(4)]
print(cluster_tracks(tracks, None, "euclidean", unknown_ids=[99]).assignment)

###############################################################################
# The average-linkage baseline needs a cutoff; this is what the per-track
# thresholds avoid.
X = np.array([[1.0, 0.0], [0.99, 0.05], [0.2, 1.0], [0.25, 0.98]])
for cutoff in (0.001, 0.4, 2.0):
    print(cutoff, hac_baseline([1, 2, 3, 4], X, cutoff))
