"""
Self-distillation on positive pairs
===================================

Two crops known to show the same face are augmented into two global and
four local views. The teacher sees a view, the student sees another, and the
student is trained to reproduce the teacher's sharpened, centered output.
"""

import numpy as np

from trackcluster.config import AugConfig, RunConfig, TrainConfig
from trackcluster.data import SyntheticConfig, generate_synthetic
from trackcluster.finetune import (batch_pair_loss, make_views, pair_loss, ssl_loss,
                                   train_iteration)
from trackcluster.pipeline import init_model
from trackcluster.tinynn import grad_check

###############################################################################
# The loss on its own: uniform teacher and student give ln 2, a student that
# matches the teacher gives the teacher's entropy.
print(ssl_loss([0.0, 0.0], [0.0, 0.0], 0.0, 1.0, 1.0))
print(ssl_loss([2.0, 0.0], [2.0, 0.0], 0.0, 1.0, 1.0))

###############################################################################
# Views keep a wrapped window of coordinates, rescale it and add jitter.
rng = np.random.default_rng(0)
a, b = rng.standard_normal((2, 8))
views = make_views(a, b, AugConfig(jitter=0.0, flip_prob=0.0), rng)
print(np.round(views.global_views, 2))
print("nonzero per local view", (views.local_views != 0).sum(axis=1))

###############################################################################
# Gradients are written by hand, so check them against finite differences.
cfg = RunConfig.preset("desk")
model = init_model(8, cfg, rng)
V = np.stack([make_views(*rng.standard_normal((2, 8)), cfg.aug, rng).stacked()
              for _ in range(4)])
rep = grad_check(lambda p: batch_pair_loss(model, V, student=p)[:2], model.student, rng=rng)
print("worst relative error", rep.max_rel_error)

###############################################################################
# One training iteration on within-track pairs lowers the pair loss.
ds = generate_synthetic(SyntheticConfig(identities=4, tracks_per_identity=3, dim=8, seed=1))
train = TrainConfig(**{**cfg.train.__dict__, "epochs_first": 12, "head_only_epochs": 4})
before = pair_loss(model, views)
log = []
model = train_iteration(model, ds.tracks, None, train, 1, cfg.aug, rng, log)
print("loss on held views", round(before, 3), "->", round(pair_loss(model, views), 3))
for r in log[::4]:
    print(r)
