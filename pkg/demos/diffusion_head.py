"""
A per-token diffusion head with an exact denoiser
=================================================

Token values follow a three-component Gaussian mixture.  The denoiser is
the exact posterior mean, so the only error left is the sampler's.
"""

import numpy as np

from maskgen.analysis import w1_empirical
from maskgen.head import DdpmTau, DpmSolver, GaussianMixture, run_head

gm = GaussianMixture([0.3, 0.5, 0.2], [[-2.0], [0.5], [3.0]], [[0.09], [0.25], [0.04]])
x1 = np.random.default_rng(0).standard_normal((20_000, 1))

print("target self-distance", round(w1_empirical(gm.sample(20_000, np.random.default_rng(1)), gm), 4))
for steps in (5, 10, 15, 50):
    row = [w1_empirical(run_head(gm, x1, DpmSolver(order, steps)), gm) for order in (1, 2)]
    ddpm = w1_empirical(run_head(gm, x1, DdpmTau(1.0, steps), np.random.default_rng(2)), gm)
    print(f"steps={steps:3d}  dpm1={row[0]:.4f}  dpm2={row[1]:.4f}  ddpm={ddpm:.4f}")
