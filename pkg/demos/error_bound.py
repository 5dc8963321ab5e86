"""
Evaluating the finite-sample error bound
========================================

System constants come from the plant, closed-loop moments from simulated
trajectories and the instrument strength from the data. The universal
constants are unknown and set to 1, so only the shape in ``N`` matters.
"""

from laurentid.bounds import bound_series, corollary_horizons
from laurentid.cli import bound_inputs_from_doc

doc = {"plant": "example4", "controller": "lqr", "r": 10, "d": 10, "N": 1000, "delta": 0.05,
       "sigma_c": 1.0, "sigma_w": 0.5, "sigma_v": 0.1}
inp = bound_inputs_from_doc(doc, trials=5)
print(f"lambda_IV ~ {inp.lam:.3e}, Gamma_cl,s = {inp.gamma_cl_s:.2f}, Gamma_cl,u = {inp.gamma_cl_u:.2f}")

for rep in bound_series(inp, [1000, 4000, 16000, 64000]):
    print(f"N = {rep.N:6d}: bound {rep.bound_value:.3e}, sample size needed {rep.sample_size_required:.3e}")

# %%
# Horizons long enough that the truncation terms fall below eps0 / N.
for N in (1000, 10000, 100000):
    print(N, corollary_horizons(inp.rho_s, inp.rho_u_inv, N, eps0=0.1))
