"""
Synthetic face tracks
=====================

A track is a short run of face crops of one person, sampled every 12th
frame. Here each crop is already an embedding vector, so a dataset is just a
set of small matrices plus optional identity labels.
"""

import tempfile

import numpy as np

from trackcluster.data import SyntheticConfig, generate_synthetic, load_dataset, save_dataset

###############################################################################
# Identities sit at random points; each track is shifted a little from its
# identity and each crop jitters around its track.
cfg = SyntheticConfig(identities=4, tracks_per_identity=3, crops_per_track=5, dim=16,
                      track_shift=0.3, crop_noise=0.15, outlier_tracks=1, seed=7)
ds = generate_synthetic(cfg)
print(len(ds), "tracks of dimension", ds.dim)

for t in ds.tracks[:3]:
    print(t.track_id, t.truth_identity, t.frames)

###############################################################################
# Distances inside a track are small, distances across identities large. The
# outlier track has no label at all.
X = np.concatenate([t.crops for t in ds])
print("mean crop norm", np.linalg.norm(X, axis=1).mean().round(3))
print("unlabelled tracks", [t.track_id for t in ds if t.truth_identity is None])

###############################################################################
# On disk a dataset is a manifest plus one little-endian float32 blob per
# track; loading it back is bit-exact.
with tempfile.TemporaryDirectory() as tmp:
    save_dataset(ds, tmp)
    back = load_dataset(tmp)
    print("round trip exact:",
          all(a.crops.tobytes() == b.crops.tobytes() for a, b in zip(ds, back)))
