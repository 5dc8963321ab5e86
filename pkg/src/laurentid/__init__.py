"""Closed-loop identification of two-sided (Laurent) FIR models of possibly unstable plants."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1

from .errors import (  # noqa: E402
    ConditioningError,
    DataFormatError,
    DegenerateHorizonError,
    DomainError,
    InstabilityError,
    RankError,
    RealizationError,
    WeakInstrumentError,
)
from .lti import (  # noqa: E402
    DecomposedRealization,
    LaurentBlock,
    StateSpaceModel,
    decompose,
    laurent_coeffs,
    laurent_input_coeffs,
    laurent_noise_coeffs,
    transient_amplification,
    truncation_tails,
)
from .control import (  # noqa: E402
    NoiseSpec,
    Trajectory,
    design_lqr,
    design_pole_placement,
    simulate_closed_loop,
    t_infinity,
)
from .estimation import (  # noqa: E402
    RegressorConfig,
    batch_iv,
    batch_ls,
    build_matrices,
    instrument_diagnostics,
    run_recursive,
)
from .realization import HankelSpec, frequency_response, reconstruct  # noqa: E402
from .bounds import BoundInputs, corollary_horizons, theorem_bound  # noqa: E402
