"""
Instrumental variables versus least squares in closed loop
==========================================================

Under feedback the input is correlated with the process noise, so least
squares can be biased. The injected excitation ``c`` is independent of
the noise and serves as the instrument.
"""

import dataclasses

import numpy as np

from laurentid.control import NoiseSpec, design_lqr, sigma_v_for_snr, simulate_closed_loop, t_infinity
from laurentid.estimation import RegressorConfig, batch_iv, batch_ls, build_matrices, instrument_diagnostics
from laurentid.experiments import example4_plant
from laurentid.lti import laurent_coeffs

model = example4_plant()
ctrl = design_lqr(model)
print(f"LQR gain {ctrl.K.ravel()}, T_inf = {t_infinity(model, ctrl).value:.2f}")

r = d = 20
theta = laurent_coeffs(model, r, d).theta

# %%
# One trajectory per seed; compare both estimators on the same data.
for seed in range(5):
    noise = NoiseSpec(sigma_c=1.0, sigma_w=1.0, sigma_v=0.0, seed=seed)
    noise = dataclasses.replace(noise, sigma_v=sigma_v_for_snr(model, ctrl, noise, 6440, 20.0))
    traj = simulate_closed_loop(model, ctrl, noise, 6440)
    dm = build_matrices(traj, RegressorConfig(r, d, 6400))
    e_iv = np.linalg.norm(batch_iv(dm) - theta, 2)
    e_ls = np.linalg.norm(batch_ls(dm) - theta, 2)
    lam = instrument_diagnostics(dm, 1.0).lambda_iv_hat
    print(f"seed {seed}: IV error {e_iv:.3f}, LS error {e_ls:.3f}, lambda_IV {lam:.2e}")

# %%
# A small lambda_IV means weak instruments: the excitation barely moves
# some input directions, and the IV estimate becomes noisy.
