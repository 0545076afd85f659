"""
Mask schedules and how many tokens each step reveals
====================================================

"""

import numpy as np

from maskgen.analysis import simulate_unmask_counts
from maskgen.schedule import MaskSchedule

# fraction of tokens masked at a few times
t = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
for kind in ("linear", "cosine", "exp", "log-exp"):
    print(f"{kind:8s}", np.round(MaskSchedule(kind).gamma(t), 3))

# simulate the reverse process with no model in the loop:
# 256 tokens, 16 steps, 10k trajectories
for kind in ("linear", "cosine", "exp"):
    prof = simulate_unmask_counts(MaskSchedule(kind), 256, 16, 10_000, seed=0)
    print(f"\n{kind}: mean reveals per step")
    print(np.round(prof.mean, 1))

# exp reveals few tokens early and many late; linear is flat at 16
