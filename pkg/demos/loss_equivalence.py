"""
Two ways of writing the same masked-token loss
==============================================

The count-uniform loss draws a masked count l uniformly from 1..N and
weights it by N/l.  The time-integral loss integrates 1/t over a linear
schedule with independent masking.  Both are computed exactly here.
"""

import numpy as np

from maskgen.loss import LossConfig, loss_exact, maskgit_loss_exact, mask_coefficients
from maskgen.masking import random_dataset
from maskgen.models import OracleModel, TabularModel
from maskgen.schedule import MaskSchedule, TimeWindow

data = random_dataset(3, 3, seed=1)
cfg = LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0.0, 1.0))

rng = np.random.default_rng(0)
for name, model in [("oracle", OracleModel(data)), ("random table", TabularModel(3, 3, rng=rng))]:
    a, b = maskgit_loss_exact(model, data), loss_exact(model, data, cfg)
    print(f"{name:13s} count-uniform {a:.10f}  diffusion {b:.10f}  gap {abs(a - b) / b:.1e}")

# per-mask weights: independent masking gives 1/(k C(N,k)), fixed-count masking does not
fixed = LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0.0, 1.0), "fixed")
print("independent", np.round(mask_coefficients(cfg, 3), 4))
print("fixed count", np.round(mask_coefficients(fixed, 3), 4))
