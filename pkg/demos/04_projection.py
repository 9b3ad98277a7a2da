"""
Recovering factor labels from one observation
=============================================

Project an unlabeled measurement vector through a trained model to get one
latent vector per causal factor, then read off each label as the closest
training row.
"""

import numpy as np

from mmblock import Projector, SynthConfig, infer_labels, label_grid, mmode_svd, synth_generate

D, _ = synth_generate(SynthConfig())
model = mmode_svd(D, (60, 5, 4, 3))
proj = Projector(model.extended_core)

rng = np.random.default_rng(1)
hits = 0
for ix in label_grid((5, 4, 3)):
    d = D[(slice(None),) + ix] + 0.01 * rng.standard_normal(D.shape[0])
    labels = infer_labels(proj.project(d), model)
    hits += [lab.index for lab in labels] == list(ix)
print("noisy accuracy %d/60" % hits)

rep = proj.project(D[:, 4, 1, 2])
for c, lab in enumerate(infer_labels(rep, model), start=1):
    print("factor %d: index %d, score %.6f" % (c, lab.index, lab.score))
print("rank-1 residual %.1e" % rep.residual)
