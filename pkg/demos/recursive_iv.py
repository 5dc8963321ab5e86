"""
Streaming estimation with a preview delay
=========================================

The two-sided model needs inputs up to ``d`` steps ahead of the output
being explained, so the recursive estimator updates the coefficients for
output ``k`` only once sample ``k + d`` has arrived.
"""

import numpy as np

from laurentid.control import NoiseSpec, design_lqr, simulate_closed_loop
from laurentid.estimation import DelayedRecursiveEstimator, RegressorConfig, batch_iv, build_matrices
from laurentid.experiments import example4_plant

model = example4_plant()
traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1.0, 0.5, 0.1, seed=3), 2040)

r = d = 20
est = DelayedRecursiveEstimator(r, d, p=1, m=1, mode="iv", eta=1e-4)
for t in range(len(traj)):
    k = est.push(traj.u[t], traj.y[t], traj.c[t])
    if t in (39, 40, 41, 500):
        print(f"sample {t}: updated output {k}")

# %%
# With no forgetting and a tiny prior, the stream ends at the batch answer.
batch = batch_iv(build_matrices(traj, RegressorConfig(r, d)))
gap = np.linalg.norm(est.theta - batch, 2) / np.linalg.norm(batch, 2)
print(f"relative gap to batch IV after {len(est.update_log)} updates: {gap:.1e}")
