"""
Two-sided impulse response of an unstable plant
===============================================

A plant with poles on both sides of the unit circle has a bounded
two-sided (non-causal) impulse response. Split the state space into its
stable and anti-stable parts and read off the coefficients directly.
"""

import numpy as np

from laurentid.experiments import example1_plant
from laurentid.lti import decompose, laurent_input_coeffs

model = example1_plant()
dec = decompose(model)
print(f"stable states: {dec.n_s}, anti-stable states: {dec.n_u}")
print(f"rho(A_s) = {dec.rho_s:.3f}, rho(A_u^-1) = {dec.rho_u_inv:.3f}")

# %%
# Coefficients for lags -25 .. 25. Future lags decay like rho(A_u^-1)^j.
block = laurent_input_coeffs(dec, model.D, r=25, d=25)
for lag in (-25, -10, -1, 0, 1, 10, 25):
    print(f"H[{lag:+3d}] = {block[lag][0, 0]: .3e}")

# %%
# Cross-check against an inverse FFT of G sampled on the unit circle.
M = 2**14
z = np.exp(2j * np.pi * np.arange(M) / M)
h = np.fft.ifft(model.transfer(z), axis=0).real
err = max(np.abs(block[lag] - h[lag % M]).max() for lag in block.lags)
print(f"largest difference from the FFT coefficients: {err:.2e}")
