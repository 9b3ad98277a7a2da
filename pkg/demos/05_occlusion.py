"""
Occlusion: part models against a whole model
============================================

Replace one part of every observation with noise.  A model of the whole
measurement vector is misled by the junk; the block model projects only
through the part that is still visible.
"""

import numpy as np

from mmblock import SynthConfig, run_experiment

report = run_experiment("occlusion", SynthConfig(parts=2, part_ranks=(3, 3, 2)), trials=20)
block = np.array(report.metrics["block_accuracy"])
whole = np.array(report.metrics["whole_accuracy"])
print("mean accuracy: block %.2f, whole %.2f" % (block.mean(), whole.mean()))
print("block never worse:", bool(np.all(block >= whole)))
print(report.summary())
