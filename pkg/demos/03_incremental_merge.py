"""
Bottom-up incremental factorization
===================================

Factorize the leaves of a three-level tree, then merge siblings upward.
The root model agrees with a batch factorization of the whole tensor, and
new data can be appended without refactorizing from scratch.
"""

import numpy as np

from mmblock import (
    append_child,
    incremental_block_svd,
    leaf_factorize,
    mmode_svd,
    predict_cost,
    reconstruct,
    subdivision,
    whole_reconstruction,
)
from mmblock.tensor import subspace_angles

rng = np.random.default_rng(0)
core = rng.standard_normal((8, 3, 3))
D = np.einsum("abc,ia,jb,kc->ijk", core, *[rng.standard_normal((n, r)) for n, r in ((32, 8), (5, 3), (4, 3))])

spec = subdivision(32, 3)
model = incremental_block_svd(D, spec, workers=2)
root = whole_reconstruction(model.wholes["0"], 32)
batch = reconstruct(mmode_svd(D, 1.0))
print("merged wholes:", sorted(model.wholes))
print("root vs batch %.1e" % (np.linalg.norm(root - batch) / np.linalg.norm(batch)))

# stream in eight more measurements
first = leaf_factorize(D[:24])
updated = append_child(first, D[24:])
scratch = mmode_svd(D, (8, 3, 3))
print("largest angle after append %.1e" % max(np.max(subspace_angles(updated.factors[c], scratch.factors[c])) for c in (1, 2)))

# the closed-form segment count
cost = predict_cost(16, 2)
print("predicted segments for N=16, M=2:", cost.S, "levels", cost.levels)
