"""
Flat M-mode SVD on synthetic data
=================================

Generate a data tensor from random factor matrices, factorize it with the
M-mode SVD, polish the factors with alternating least squares and check the
reconstruction.
"""

import numpy as np

from mmblock import SynthConfig, hooi_refine, mmode_svd, reconstruct, synth_generate

# 64 measurements for every combination of 5 x 4 x 3 factor values
D, truth = synth_generate(SynthConfig(seed=0))
print("data tensor", D.shape)

# full ranks reproduce the data to rounding error
model = mmode_svd(D, 1.0)
err = np.linalg.norm(reconstruct(model) - D) / np.linalg.norm(D)
print("full-rank ranks", model.ranks, "relative error %.1e" % err)

# a truncated model loses energy; a few ALS sweeps recover some of it
small = mmode_svd(D, (12, 3, 3, 2))
refined = hooi_refine(D, small, max_iters=30)
for name, m in (("truncated", small), ("refined", refined)):
    e = np.linalg.norm(reconstruct(m) - D) / np.linalg.norm(D)
    print("%-9s relative error %.4f" % (name, e))
print("loss trace never increases:", bool(np.all(np.diff(refined.losses) <= 1e-10)))
