"""Non-causal FIR regression: data matrices, batch LS/IV, delayed recursive LS/IV.

Column ``j`` of every data matrix belongs to output index ``k = r + j`` and
stacks a signal as ``[s(k+d); s(k+d-1); ...; s(k-r)]`` (most future block
first), so that ``theta = [H_{-d} ... H_r]`` multiplies it directly.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .control import Trajectory
from .errors import ConditioningError, DataFormatError, DimensionError, DomainError, WeakInstrumentError
from .lti import DecomposedRealization, LaurentBlock, laurent_noise_coeffs

__all__ = [
    "RegressorConfig",
    "DataMatrices",
    "InstrumentDiagnostics",
    "RecursiveState",
    "RecursiveHistory",
    "DelayedRecursiveEstimator",
    "block_regressor",
    "build_matrices",
    "batch_ls",
    "batch_iv",
    "instrument_diagnostics",
    "init_recursive_state",
    "rls_step",
    "riv_step",
    "run_recursive",
    "disturbance_matrix",
    "save_estimate",
    "save_diagnostics",
]

log = logging.getLogger(__name__)

DENOMINATOR_GUARD = 1e-12


@dataclass(frozen=True)
class RegressorConfig:
    """Horizons ``r`` (lookback) and ``d`` (preview) and number of regression columns ``N``.

    ``N = None`` means "as many as the trajectory allows".
    """

    r: int
    d: int
    N: Optional[int] = None

    def __post_init__(self):
        if self.r < 0 or self.d < 0:
            raise DomainError(f"horizons must be nonnegative, got r={self.r}, d={self.d}")
        if self.N is not None and self.N < 1:
            raise DomainError("N must be at least 1")

    @property
    def mu(self) -> int:
        return self.r + self.d + 1

    @property
    def ell(self) -> Optional[int]:
        return None if self.N is None else self.N + self.r + self.d - 1

    def resolve(self, length: int) -> "RegressorConfig":
        N = length - self.r - self.d if self.N is None else self.N
        if N < 1 or N + self.r + self.d > length:
            raise IndexError(
                f"trajectory of length {length} too short for r={self.r}, d={self.d}, N={self.N}"
            )
        return replace(self, N=N)


def block_regressor(signal, r: int, d: int, N: int) -> np.ndarray:
    """Stack ``[s(k+d); ...; s(k-r)]`` for ``k = r .. r+N-1`` into a ``(dim*mu, N)`` matrix."""
    s = np.asarray(signal, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < N + r + d:
        raise IndexError(f"signal of length {s.shape[0]} shorter than N + r + d = {N + r + d}")
    mu = r + d + 1
    dim = s.shape[1]
    out = np.empty((dim * mu, N))
    for i in range(mu):
        start = r + d - i
        out[i * dim : (i + 1) * dim] = s[start : start + N].T
    return out


@dataclass(frozen=True, eq=False)
class DataMatrices:
    """``Psi_y`` (m x N), ``Phi`` and ``Phi_c`` (p*mu x N); ground-truth extras optional."""

    r: int
    d: int
    Psi_y: np.ndarray
    Phi: np.ndarray
    Phi_c: Optional[np.ndarray] = None
    Phi_f: Optional[np.ndarray] = field(default=None, repr=False)
    Phi_w: Optional[np.ndarray] = field(default=None, repr=False)
    Psi_v: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.Psi_y.shape[1]

    @property
    def mu(self) -> int:
        return self.r + self.d + 1

    @property
    def p(self) -> int:
        return self.Phi.shape[0] // self.mu

    @property
    def m(self) -> int:
        return self.Psi_y.shape[0]


def build_matrices(traj: Trajectory, cfg: RegressorConfig, include_ground_truth: bool = False) -> DataMatrices:
    """Data matrices for output indices ``k = r, ..., ell - d``."""
    cfg = cfg.resolve(len(traj))
    r, d, N = cfg.r, cfg.d, cfg.N
    Psi_y = traj.y[r : r + N].T.copy()
    Phi = block_regressor(traj.u, r, d, N)
    Phi_c = None if traj.c is None else block_regressor(traj.c, r, d, N)
    Phi_f = Phi_w = Psi_v = None
    if include_ground_truth:
        if not traj.has_ground_truth:
            raise DataFormatError("trajectory carries no ground-truth channels")
        Phi_f = block_regressor(traj.f, r, d, N)
        Phi_w = block_regressor(traj.w, r, d, N)
        Psi_v = traj.v[r : r + N].T.copy()
    return DataMatrices(r, d, Psi_y, Phi, Phi_c, Phi_f, Phi_w, Psi_v)


def batch_ls(dm: DataMatrices) -> np.ndarray:
    """Least-squares estimate ``Psi_y Phi' (Phi Phi')^{-1}`` via a Cholesky solve.

    Raises
    ------
    ConditioningError
        If ``sigma_min(Phi Phi') <= 1e-10 * trace / (p mu)``.
    """
    G = dm.Phi @ dm.Phi.T
    ev = np.linalg.eigvalsh(G)
    floor = 1e-10 * np.trace(G) / G.shape[0]
    if ev[0] <= floor:
        raise ConditioningError(
            f"regressor Gram matrix is rank deficient (sigma_min = {ev[0]:.3e}, floor {floor:.3e})",
            sigma_min=float(ev[0]),
        )
    rhs = dm.Phi @ dm.Psi_y.T
    return sla.cho_solve(sla.cho_factor(G), rhs).T


def batch_iv(dm: DataMatrices) -> np.ndarray:
    """Instrumental-variable estimate ``Psi_y Phi_c' (Phi Phi_c')^{-1}``.

    The non-symmetric cross-Gram is factored by LU with partial pivoting; no
    regularization is applied.

    Raises
    ------
    WeakInstrumentError
        If the cross-Gram is numerically singular; carries ``sigma_min / N``.
    """
    if dm.Phi_c is None:
        raise DataFormatError("IV estimation needs the excitation channel c")
    G = dm.Phi @ dm.Phi_c.T
    sv = np.linalg.svd(G, compute_uv=False)
    floor = 1e-10 * np.sum(sv) / sv.size
    if sv[-1] <= floor:
        raise WeakInstrumentError(
            f"input/instrument cross-Gram is singular (s_iv_hat = {sv[-1] / dm.N:.3e})",
            sigma_min=float(sv[-1] / dm.N),
        )
    rhs = dm.Psi_y @ dm.Phi_c.T
    # theta G = rhs  <=>  G' theta' = rhs'
    return sla.lu_solve(sla.lu_factor(G), rhs.T, trans=1).T


@dataclass(frozen=True, eq=False)
class InstrumentDiagnostics:
    R_uc_hat: np.ndarray
    s_iv_hat: float
    lambda_iv_hat: float
    N: int
    r: int
    d: int
    S_fc_hat: Optional[np.ndarray] = None
    U_hat: Optional[np.ndarray] = None
    triangularity_residual: Optional[float] = None

    def block_norms(self, which: str = "S_fc_hat") -> np.ndarray:
        """Spectral norms of the ``p x p`` blocks of ``R_uc_hat`` or ``S_fc_hat``."""
        M = getattr(self, which)
        mu = self.r + self.d + 1
        p = M.shape[0] // mu
        return np.array(
            [[np.linalg.norm(M[i * p : (i + 1) * p, j * p : (j + 1) * p], 2) for j in range(mu)] for i in range(mu)]
        )

    def to_dict(self) -> dict:
        return {
            "s_iv": self.s_iv_hat,
            "lambda_iv": self.lambda_iv_hat,
            "triangularity_residual": self.triangularity_residual,
            "N": self.N,
            "r": self.r,
            "d": self.d,
        }


def instrument_diagnostics(dm: DataMatrices, sigma_c: float) -> InstrumentDiagnostics:
    """Empirical ``R_uc``, instrument strength and (with ground truth) the feedback part.

    ``triangularity_residual`` is the largest block norm of ``S_fc_hat`` at
    block positions ``j <= i``, which vanish in population for a strictly
    causal controller. ``U_hat`` keeps only the strictly upper blocks divided
    by ``sigma_c**2``.
    """
    if sigma_c <= 0:
        raise DomainError("lambda_IV is undefined for sigma_c = 0")
    if dm.Phi_c is None:
        raise DataFormatError("instrument diagnostics need the excitation channel c")
    N = dm.N
    R = dm.Phi @ dm.Phi_c.T / N
    s_iv = float(np.linalg.svd(R, compute_uv=False)[-1])
    lam = s_iv**2 / sigma_c**2
    S = U = resid = None
    if dm.Phi_f is not None:
        S = dm.Phi_f @ dm.Phi_c.T / N
        p, mu = dm.p, dm.mu
        lower = np.kron(np.tril(np.ones((mu, mu))), np.ones((p, p))).astype(bool)
        U = np.where(lower, 0.0, S) / sigma_c**2
        resid = max(
            np.linalg.norm(S[i * p : (i + 1) * p, j * p : (j + 1) * p], 2) for i in range(mu) for j in range(i + 1)
        )
        resid = float(resid)
    return InstrumentDiagnostics(R, s_iv, lam, N, dm.r, dm.d, S, U, resid)


def disturbance_matrix(traj: Trajectory, cfg: RegressorConfig, dec: DecomposedRealization) -> np.ndarray:
    """Aggregate disturbance ``gamma Phi_w + Psi_e + Psi_v`` from ground-truth channels.

    Satisfies ``Psi_y = theta Phi + E`` for the true two-sided coefficients.
    """
    if not traj.has_ground_truth or traj.x_s is None:
        raise DataFormatError("disturbance matrix needs ground-truth states and noises")
    cfg = cfg.resolve(len(traj))
    r, d, N = cfg.r, cfg.d, cfg.N
    if r + N + d > len(traj) - 1:
        raise IndexError("non-causal tail needs x(k+d+1); trajectory one sample too short")
    gamma = laurent_noise_coeffs(dec, r, d).theta
    Phi_w = block_regressor(traj.w, r, d, N)
    k = np.arange(r, r + N)
    Gs = dec.C_s @ np.linalg.matrix_power(dec.A_s, r)
    Gu = dec.C_u @ np.linalg.matrix_power(np.linalg.inv(dec.A_u), d + 1) if dec.n_u else dec.C_u
    e = traj.x_s[k - r] @ Gs.T + traj.x_u[k + d + 1] @ Gu.T
    return gamma @ Phi_w + e.T + traj.v[k].T


@dataclass(frozen=True, eq=False)
class RecursiveState:
    """Snapshot of a recursive estimator.

    ``P`` is the inverse Gram (LS) or inverse cross-covariance (IV).
    ``S_acc``/``M_acc`` are only tracked when requested and then satisfy
    ``S_acc = inv(P)``, ``theta = M_acc @ P`` up to roundoff.
    """

    theta: np.ndarray
    P: np.ndarray
    lambda_f: float
    eta: float
    samples_seen: int = 0
    skipped: int = 0
    S_acc: Optional[np.ndarray] = field(default=None, repr=False)
    M_acc: Optional[np.ndarray] = field(default=None, repr=False)


def init_recursive_state(pmu: int, m: int, eta: float, lambda_f: float = 1.0, track: bool = False) -> RecursiveState:
    """``theta_0 = 0``, ``P_0 = I / eta`` (equivalently ``S_0 = eta I``)."""
    if not 0 < lambda_f <= 1:
        raise DomainError(f"forgetting factor must lie in (0, 1], got {lambda_f}")
    if eta <= 0:
        raise DomainError("eta must be positive")
    S = eta * np.eye(pmu) if track else None
    M = np.zeros((m, pmu)) if track else None
    return RecursiveState(np.zeros((m, pmu)), np.eye(pmu) / eta, lambda_f, eta, 0, 0, S, M)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DataFormatError("recursive update received non-finite data")


def rls_step(state: RecursiveState, phi_k, y_k) -> RecursiveState:
    """One forgetting-factor RLS update with regressor ``phi_k`` and output ``y_k``."""
    phi = np.asarray(phi_k, dtype=float).ravel()
    y = np.asarray(y_k, dtype=float).ravel()
    _check_finite(phi, y)
    lam, P, theta = state.lambda_f, state.P, state.theta
    Pphi = P @ phi
    g = Pphi / (lam + phi @ Pphi)
    theta = theta + np.outer(y - theta @ phi, g)
    P = (P - np.outer(g, phi @ P)) / lam
    S = M = None
    if state.S_acc is not None:
        S = lam * state.S_acc + np.outer(phi, phi)
        M = lam * state.M_acc + np.outer(y, phi)
    return replace(state, theta=theta, P=P, samples_seen=state.samples_seen + 1, S_acc=S, M_acc=M)


def riv_step(state: RecursiveState, phi_k, z_k, y_k) -> RecursiveState:
    """One recursive IV update (Sherman-Morrison form of ``S_k = lam S_{k-1} + phi z'``).

    If ``|lambda_f + z' P phi| <= 1e-12`` the update is skipped, logged, and
    counted in ``skipped``; estimate and ``P`` stay unchanged.
    """
    phi = np.asarray(phi_k, dtype=float).ravel()
    z = np.asarray(z_k, dtype=float).ravel()
    y = np.asarray(y_k, dtype=float).ravel()
    _check_finite(phi, z, y)
    lam, P, theta = state.lambda_f, state.P, state.theta
    Pphi = P @ phi
    zP = z @ P
    den = lam + z @ Pphi
    if abs(den) <= DENOMINATOR_GUARD:
        log.warning("recursive IV update skipped: denominator %.3e below guard", den)
        return replace(state, samples_seen=state.samples_seen + 1, skipped=state.skipped + 1)
    g = Pphi / den
    h = zP / den
    theta = theta + np.outer(y - theta @ phi, h)
    P = (P - np.outer(g, zP)) / lam
    S = M = None
    if state.S_acc is not None:
        S = lam * state.S_acc + np.outer(phi, z)
        M = lam * state.M_acc + np.outer(y, z)
    return replace(state, theta=theta, P=P, samples_seen=state.samples_seen + 1, S_acc=S, M_acc=M)


class DelayedRecursiveEstimator:
    """Online two-sided FIR estimator with a fixed ``d``-sample delay.

    Samples are pushed in time order. The update belonging to output index
    ``k`` fires when sample ``k + d`` arrives (the regressor needs
    ``u(k+d)``); with ``d = 0`` this is the usual causal RLS.

    Parameters
    ----------
    mode : {"ls", "iv"}
    eta : float, optional
        Initialization ``P_0 = I / eta``. Defaults to
        ``1e-8 * (1 + ||phi_first||**2)`` for LS and ``1e-4 * sigma_c**2`` for IV.
    """

    def __init__(self, r, d, p, m, mode="iv", lambda_f=1.0, eta=None, sigma_c=None, track=False):
        if mode not in ("ls", "iv"):
            raise DomainError(f"mode must be 'ls' or 'iv', got {mode!r}")
        if mode == "iv" and eta is None and (sigma_c is None or sigma_c <= 0):
            raise DomainError("IV mode needs eta or a positive sigma_c")
        self.r, self.d, self.p, self.m = r, d, p, m
        self.mode = mode
        self.lambda_f = lambda_f
        self.eta = eta if eta is not None else (1e-4 * sigma_c**2 if mode == "iv" else None)
        self.track = track
        self.mu = r + d + 1
        self._u = deque(maxlen=self.mu)
        self._c = deque(maxlen=self.mu)
        self._y = deque(maxlen=d + 1)
        self.arrivals = 0
        self.state: Optional[RecursiveState] = None
        self.update_log: list[tuple[int, int]] = []

    def push(self, u, y, c=None) -> Optional[int]:
        """Consume sample ``t``; returns the output index updated, if any."""
        u = np.asarray(u, dtype=float).reshape(self.p)
        y = np.asarray(y, dtype=float).reshape(self.m)
        self._u.appendleft(u)
        self._y.appendleft(y)
        if self.mode == "iv":
            if c is None:
                raise DataFormatError("IV mode requires the excitation sample c")
            self._c.appendleft(np.asarray(c, dtype=float).reshape(self.p))
        t = self.arrivals
        self.arrivals += 1
        k = t - self.d
        if k < self.r:
            return None
        phi = np.concatenate(self._u)
        y_k = self._y[-1]
        if self.state is None:
            eta = self.eta if self.eta is not None else 1e-8 * (1.0 + phi @ phi)
            self.state = init_recursive_state(self.p * self.mu, self.m, eta, self.lambda_f, self.track)
        if self.mode == "ls":
            self.state = rls_step(self.state, phi, y_k)
        else:
            self.state = riv_step(self.state, phi, np.concatenate(self._c), y_k)
        self.update_log.append((t, k))
        return k

    @property
    def theta(self) -> Optional[np.ndarray]:
        return None if self.state is None else self.state.theta


@dataclass(frozen=True, eq=False)
class RecursiveHistory:
    final: RecursiveState
    checkpoints: list = field(default_factory=list)  # (updates, k, theta)
    update_log: list = field(default_factory=list)  # (arrival t, output k)

    @property
    def theta(self) -> np.ndarray:
        return self.final.theta


def run_recursive(
    traj: Trajectory,
    cfg: RegressorConfig,
    mode: str = "iv",
    lambda_f: float = 1.0,
    eta: Optional[float] = None,
    checkpoints: Sequence[int] = (),
    sigma_c: Optional[float] = None,
    track: bool = False,
) -> RecursiveHistory:
    """Stream ``traj`` through a :class:`DelayedRecursiveEstimator`.

    Processes exactly ``cfg.N`` updates (all available when ``N`` is None).
    ``checkpoints`` are update counts at which ``theta`` is recorded.
    ``sigma_c`` defaults to the sample standard deviation of ``c``.
    """
    cfg = cfg.resolve(len(traj))
    if mode == "iv" and traj.c is None:
        raise DataFormatError("IV mode requires an excitation column c")
    if mode == "iv" and eta is None and sigma_c is None:
        sigma_c = float(np.std(traj.c))
    est = DelayedRecursiveEstimator(cfg.r, cfg.d, traj.p, traj.m, mode, lambda_f, eta, sigma_c, track)
    marks = set(int(c) for c in checkpoints)
    snaps = []
    last = cfg.N + cfg.r + cfg.d
    for t in range(last):
        k = est.push(traj.u[t], traj.y[t], None if traj.c is None else traj.c[t])
        if k is not None and len(est.update_log) in marks:
            snaps.append((len(est.update_log), k, est.state.theta.copy()))
    return RecursiveHistory(est.state, snaps, list(est.update_log))


def save_estimate(theta, r: int, d: int, path) -> None:
    """CSV with columns ``lag_index, out_row, in_col, value``."""
    LaurentBlock.from_theta(theta, r, d).to_csv(path, columns=("lag_index", "out_row", "in_col", "value"))


def save_diagnostics(diag: InstrumentDiagnostics, path, extra: Optional[dict] = None) -> None:
    doc = diag.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def check_dims(theta, m: int, pmu: int):
    theta = np.asarray(theta)
    if theta.shape != (m, pmu):
        raise DimensionError(f"theta has shape {theta.shape}, expected {(m, pmu)}")
    return theta
