"""
From coefficients back to a state-space model
=============================================

The causal half of the coefficients is realized forward in time, the
anti-causal half in reverse time; the feedthrough follows from the lag-0
coefficient.
"""

import numpy as np

from laurentid.experiments import example1_plant
from laurentid.lti import laurent_coeffs
from laurentid.realization import frequency_grid, frequency_response, reconstruct, response_mismatch

model = example1_plant()
block = laurent_coeffs(model, 25, 25)
rec = reconstruct(block)
print(f"orders: stable {rec.stable.order}, anti-stable {rec.unstable.order}")
print("Hankel singular values (stable):", np.array2string(rec.stable.singular_values[:6], precision=2))

# %%
# Poles and frequency response of the realization.
print("true poles:     ", np.sort_complex(np.linalg.eigvals(model.A)).round(4))
print("realized poles: ", np.sort_complex(rec.poles()).round(4))
om = frequency_grid(256)
mag, ph = response_mismatch(frequency_response(model, om), frequency_response(rec, om))
print(f"worst magnitude error {np.abs(mag).max():.1e} dB, phase {np.abs(ph).max():.1e} deg")
