"""Finite-sample error bound for batch IV estimates of a two-sided FIR block.

Every scalar is evaluated verbatim from its closed-form definition. The
universal constants are unknown, so they default to 1 and every report
carries the constant vector that produced it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateHorizonError, DomainError, WeakInstrumentError
from .lti import DecomposedRealization, laurent_noise_coeffs, truncation_tails

__all__ = [
    "UniversalConstants",
    "BoundInputs",
    "BoundReport",
    "evaluate_helpers",
    "truncation_scales",
    "theorem_bound",
    "bound_series",
    "corollary_horizons",
    "system_constants",
    "save_bound_report",
    "save_bound_series",
]


@dataclass(frozen=True)
class UniversalConstants:
    c0: float = 1.0
    c_w: float = 1.0
    c_v: float = 1.0
    c_es: float = 1.0
    c_eu: float = 1.0
    kappa_w: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise DomainError(f"constant {name} must be positive, got {value}")


@dataclass(frozen=True)
class BoundInputs:
    """Everything the bound depends on.

    Radii must lie in ``[0, 1)``; a radius of 0 stands for an empty or
    nilpotent half. Instrument strength is given either as ``lambda_iv`` or
    as ``s_iv`` (then ``lambda_iv = s_iv**2 / sigma_c**2``).
    """

    rho_s: float
    rho_u_inv: float
    phi_s: float
    phi_u: float
    tail_s: float  # ||C_s A_s^r||
    tail_u: float  # ||C_u A_u^{-d-1}||
    gamma_norm: float  # ||gamma_{r,d}||
    gamma_cl_s: float
    gamma_cl_u: float
    sigma_c: float
    sigma_w: float
    sigma_v: float
    m: int
    p: int
    l: int
    r: int
    d: int
    N: int
    delta: float
    lambda_iv: Optional[float] = None
    s_iv: Optional[float] = None
    constants: UniversalConstants = field(default_factory=UniversalConstants)

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("rho_s", "rho_u_inv"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise DomainError(f"{name} must lie in [0, 1), got {value}")
        if self.r < 0 or self.d < 0 or self.N < 1:
            raise DomainError("horizons must be nonnegative and N positive")
        if self.lambda_iv is None and self.s_iv is None:
            raise DomainError("give lambda_iv or s_iv")

    @property
    def mu(self) -> int:
        return self.r + self.d + 1

    @property
    def lam(self) -> float:
        if self.lambda_iv is not None:
            return float(self.lambda_iv)
        if self.sigma_c <= 0:
            raise DomainError("lambda_IV is undefined for sigma_c = 0")
        return float(self.s_iv) ** 2 / self.sigma_c**2


@dataclass(frozen=True)
class BoundReport:
    chi_N: float
    N_w: float
    L_w1: float
    L_w2: float
    M_v: float
    D_s: float
    M_s: float
    D_u: float
    M_u: float
    sigma_e_s: float
    sigma_e_u: float
    beta_w: float
    beta_v: float
    beta_es: float
    beta_eu: float
    lambda_iv: float
    N: int
    sample_size_required: float
    bound_value: float
    sample_size_satisfied: bool
    constants: UniversalConstants = field(default_factory=UniversalConstants)

    def to_dict(self) -> dict:
        return asdict(self)


def _tail_ratio(h: int, rho: float) -> float:
    if h == 0:
        raise DegenerateHorizonError("horizon 0 makes h / (1 - rho^h) undefined; use h >= 1")
    return h / (1.0 - rho**h)


def evaluate_helpers(inp: BoundInputs) -> dict:
    """Logarithmic factors and dimension helpers (no noise levels involved)."""
    mu, p, l, m, N, dl = inp.mu, inp.p, inp.l, inp.m, inp.N, inp.delta
    chi = math.log(16 * mu * p / dl) ** 2 * math.log(16 * N * p / dl) ** 2
    L1 = math.log(16 * mu * (l + p) / dl)
    L2 = math.log(16 * N * (l + p) / dl)
    N_w = inp.constants.kappa_w * mu * (l + p) * L1**2 * L2**2
    M_v = mu * p + m + math.log(16 / dl)
    D_s = 1 + m * _tail_ratio(inp.r, inp.rho_s) / N
    M_s = inp.r * p + m + math.log(16 * (inp.r + 1) / dl)
    D_u = 1 + m * _tail_ratio(inp.d, inp.rho_u_inv) / N
    M_u = inp.d * p + m + math.log(16 * (inp.d + 1) / dl)
    return dict(chi_N=chi, N_w=N_w, L_w1=L1, L_w2=L2, M_v=M_v, D_s=D_s, M_s=M_s, D_u=D_u, M_u=M_u)


def truncation_scales(inp: BoundInputs) -> tuple[float, float]:
    """Stable and reverse-time unstable truncation scales.

    Raises
    ------
    DegenerateHorizonError
        If ``r = 0`` or ``d = 0``.
    """
    ss = inp.phi_s * inp.tail_s * math.sqrt(_tail_ratio(inp.r, inp.rho_s) * inp.gamma_cl_s)
    su = inp.phi_u * inp.tail_u * math.sqrt(_tail_ratio(inp.d, inp.rho_u_inv) * inp.gamma_cl_u)
    return ss, su


def theorem_bound(inp: BoundInputs) -> BoundReport:
    """Compose the high-probability error bound and the sample-size condition.

    Raises
    ------
    WeakInstrumentError
        If ``lambda_IV <= 0``.
    """
    lam = inp.lam
    if not lam > 0:
        raise WeakInstrumentError(f"lambda_IV must be positive, got {lam}", sigma_min=lam)
    h = evaluate_helpers(inp)
    ss, su = truncation_scales(inp)
    k = inp.constants
    N = inp.N
    beta_w = k.c_w * inp.sigma_w * inp.gamma_norm * max(math.sqrt(h["N_w"]), h["N_w"] / math.sqrt(N))
    beta_v = k.c_v * inp.sigma_v * math.sqrt(h["M_v"])
    beta_es = k.c_es * ss * math.sqrt(h["D_s"] * h["M_s"])
    beta_eu = k.c_eu * su * math.sqrt(h["D_u"] * h["M_u"])
    bound = (beta_w + beta_es + beta_eu + beta_v) / math.sqrt(lam * N)
    need = k.c0 * inp.mu * inp.p * h["chi_N"] * max(1.0, inp.sigma_c**2 / lam)
    return BoundReport(
        sigma_e_s=ss,
        sigma_e_u=su,
        beta_w=beta_w,
        beta_v=beta_v,
        beta_es=beta_es,
        beta_eu=beta_eu,
        lambda_iv=lam,
        N=N,
        sample_size_required=need,
        bound_value=bound,
        sample_size_satisfied=bool(N >= need),
        constants=k,
        **h,
    )


def bound_series(inp: BoundInputs, Ns: Iterable[int]) -> list[BoundReport]:
    return [theorem_bound(replace(inp, N=int(n))) for n in Ns]


def corollary_horizons(rho_s: float, rho_u_inv: float, N: int, eps0: float) -> tuple[int, int]:
    """Smallest horizons with ``rho^h <= eps0 / N`` (unit constant in the logarithmic rule).

    The ceiling of ``log(N / eps0) / |log rho|`` is corrected by at most a
    step either way so that the inequality holds exactly in floating point.
    """
    if not 0 < eps0 < 1:
        raise DomainError(f"eps0 must lie in (0, 1), got {eps0}")
    if N < 1:
        raise DomainError("N must be positive")
    target = eps0 / N

    def horizon(rho: float) -> int:
        if not 0 < rho < 1:
            raise DomainError(f"radius must lie in (0, 1), got {rho}")
        h = max(0, math.ceil(math.log(N / eps0) / abs(math.log(rho))))
        while rho**h > target:
            h += 1
        while h > 0 and rho ** (h - 1) <= target:
            h -= 1
        return h

    return horizon(rho_s), horizon(rho_u_inv)


def system_constants(dec: DecomposedRealization, r: int, d: int) -> dict:
    """System-side inputs: radii, transient amplification, tail and noise-map norms."""
    tails = truncation_tails(dec, r, d)
    gamma = laurent_noise_coeffs(dec, r, d).theta
    return dict(
        rho_s=dec.rho_s,
        rho_u_inv=dec.rho_u_inv,
        phi_s=tails.phi_s,
        phi_u=tails.phi_u,
        tail_s=tails.stable_tail_norm,
        tail_u=tails.unstable_tail_norm,
        gamma_norm=float(np.linalg.norm(gamma, 2)),
    )


def save_bound_report(report: BoundReport, path, extra: Optional[dict] = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def save_bound_series(reports: Sequence[BoundReport], path) -> None:
    """CSV with one row per ``N`` and a column per named scalar."""
    keys = [k for k in reports[0].to_dict() if k != "constants"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for rep in reports:
            doc = rep.to_dict()
            wr.writerow([repr(doc[k]) if isinstance(doc[k], float) else doc[k] for k in keys])
