"""State-space models, stable/unstable decoupling and two-sided Markov parameters.

A plant ``x(k+1) = A x + B u + Bw w``, ``y = C x + D u + v`` whose transfer
matrix has no poles on the unit circle is split into a stable part and an
anti-stable part. The stable part contributes the usual causal Markov
parameters, the anti-stable part contributes coefficients of positive powers
of ``z`` that are generated by ``inv(A_u)`` and therefore decay.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dtrsyl

from .errors import DataFormatError, DimensionError, DomainError, UnitCircleError

__all__ = [
    "UNIT_CIRCLE_TOL",
    "StateSpaceModel",
    "DecomposedRealization",
    "LaurentBlock",
    "TruncationTailReport",
    "spectral_radius",
    "transient_amplification",
    "decompose",
    "laurent_input_coeffs",
    "laurent_noise_coeffs",
    "laurent_coeffs",
    "truncated_fir_response",
    "truncation_tails",
    "load_model",
    "save_model",
]

UNIT_CIRCLE_TOL = 1e-8


class ConvergenceWarning(RuntimeWarning):
    pass


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.array(x, dtype=float, copy=True)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1) if name in ("C", "D") else a.reshape(-1, 1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    a.setflags(write=False)
    return a


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Discrete-time plant ``(A, B, Bw, C, D)``.

    ``Bw`` defaults to ``B`` (disturbances entering at the actuator) when not
    given. Construction rejects eigenvalues of ``A`` whose modulus is within
    ``unit_circle_tol`` of one.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: Optional[np.ndarray] = None
    Bw: Optional[np.ndarray] = None
    unit_circle_tol: float = UNIT_CIRCLE_TOL

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise DimensionError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise DimensionError(f"C has {C.shape[1]} columns, expected {n}")
        m, p = C.shape[0], B.shape[1]
        D = np.zeros((m, p)) if self.D is None else self.D
        D = _as_matrix(D, "D")
        if D.shape != (m, p):
            raise DimensionError(f"D has shape {D.shape}, expected {(m, p)}")
        Bw = B if self.Bw is None else _as_matrix(self.Bw, "Bw")
        if Bw.shape[0] != n:
            raise DimensionError(f"Bw has {Bw.shape[0]} rows, expected {n}")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D), ("Bw", Bw)):
            object.__setattr__(self, name, val)
        if n:
            moduli = np.abs(np.linalg.eigvals(A))
            bad = np.abs(moduli - 1.0) < self.unit_circle_tol
            if np.any(bad):
                raise UnitCircleError(
                    f"A has eigenvalue(s) of modulus {moduli[bad]} on the unit circle "
                    f"(tolerance {self.unit_circle_tol:g})"
                )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.Bw.shape[1]

    def transfer(self, z, noise: bool = False) -> np.ndarray:
        """Evaluate ``C (zI - A)^{-1} B + D`` (or the ``w -> y`` map) at points ``z``.

        Returns an array of shape ``z.shape + (m, p)``.
        """
        Bin = self.Bw if noise else self.B
        Dd = np.zeros((self.m, Bin.shape[1])) if noise else self.D
        return _eval_ss(self.A, Bin, self.C, Dd, z)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Bw": self.Bw.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StateSpaceModel":
        missing = [k for k in ("A", "B", "C") if k not in doc]
        if missing:
            raise DataFormatError(f"model document missing keys {missing}")
        return cls(A=doc["A"], B=doc["B"], C=doc["C"], D=doc.get("D"), Bw=doc.get("Bw"))


def _eval_ss(A, B, C, D, z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    shape = z.shape
    zf = z.reshape(-1)
    n = A.shape[0]
    out = np.broadcast_to(D.astype(complex), (zf.size,) + D.shape).copy()
    if n:
        M = zf[:, None, None] * np.eye(n) - A
        X = np.linalg.solve(M, np.broadcast_to(B, (zf.size,) + B.shape))
        out += C @ X
    return out.reshape(shape + D.shape)


def load_model(path) -> StateSpaceModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    return StateSpaceModel.from_dict(doc)


def save_model(model: StateSpaceModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


def spectral_radius(M) -> float:
    """Largest eigenvalue modulus of a square matrix (0 for an empty one)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectral_radius needs a square matrix, got shape {M.shape}")
    if M.size == 0:
        return 0.0
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigenvalue computation failed: {exc}") from exc
    return float(np.max(np.abs(ev)))


def transient_amplification(M, max_steps: int = 10_000) -> float:
    r"""Transient amplification :math:`\sup_{\tau\ge0}\|M^\tau\|/\rho(M)^{\tau/2}`.

    The ratio is the spectral norm of ``S**tau`` with ``S = M / sqrt(rho)``,
    which avoids underflow of ``rho**(tau/2)``. The scan stops at the first
    ``tau >= 1`` with ``||S**tau|| <= 1``: by submultiplicativity every later
    power is bounded by one already seen, so the running maximum is exact.

    A nilpotent ``M`` has ``rho = 0``; the ratio is then taken as 1 for the
    zero matrix and ``inf`` otherwise.

    Raises
    ------
    DomainError
        If ``rho(M) >= 1``.
    """
    M = np.asarray(M, dtype=float)
    rho = spectral_radius(M)
    if rho >= 1.0:
        raise DomainError(f"transient_amplification requires rho(M) < 1, got {rho:.6g}")
    if M.size == 0 or not np.any(M):
        return 1.0
    if rho == 0.0:
        return float("inf")
    scaled = M / np.sqrt(rho)
    power = np.eye(M.shape[0])
    best = 1.0
    for _ in range(max_steps):
        power = power @ scaled
        val = np.linalg.norm(power, 2)
        best = max(best, val)
        if val <= 1.0:
            return float(best)
    warnings.warn(
        f"transient_amplification did not settle within {max_steps} steps; returning best value",
        ConvergenceWarning,
        stacklevel=2,
    )
    return float(best)


@dataclass(frozen=True, eq=False)
class DecomposedRealization:
    """Block-diagonal realization ``T^{-1} A T = diag(A_s, A_u)``.

    ``T = V W`` where ``V`` holds ordered real Schur vectors and ``W`` removes
    the Schur coupling block through a Sylvester solve.
    """

    A_s: np.ndarray
    A_u: np.ndarray
    B_s: np.ndarray
    B_u: np.ndarray
    B_sw: np.ndarray
    B_uw: np.ndarray
    C_s: np.ndarray
    C_u: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray
    rho_s: float
    rho_u_inv: float
    sylvester_residual: float = 0.0

    @property
    def n_s(self) -> int:
        return self.A_s.shape[0]

    @property
    def n_u(self) -> int:
        return self.A_u.shape[0]

    @property
    def A_u_inv(self) -> np.ndarray:
        if self.n_u == 0:
            return np.zeros((0, 0))
        return np.linalg.inv(self.A_u)

    def split_state(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Map original states (rows of ``x``) to ``(x_s, x_u)``."""
        xd = np.asarray(x, dtype=float) @ self.T_inv.T
        return xd[..., : self.n_s], xd[..., self.n_s :]

    def stable_transfer(self, z) -> np.ndarray:
        zero = np.zeros((self.C_s.shape[0], self.B_s.shape[1]))
        return _eval_ss(self.A_s, self.B_s, self.C_s, zero, z)

    def unstable_transfer(self, z) -> np.ndarray:
        zero = np.zeros((self.C_u.shape[0], self.B_u.shape[1]))
        return _eval_ss(self.A_u, self.B_u, self.C_u, zero, z)


def decompose(model: StateSpaceModel, unit_circle_tol: float = UNIT_CIRCLE_TOL) -> DecomposedRealization:
    """Split ``model`` into stable and anti-stable blocks.

    Parameters
    ----------
    model : StateSpaceModel
    unit_circle_tol : float
        Eigenvalues with ``abs(abs(lam) - 1) < unit_circle_tol`` are rejected.

    Returns
    -------
    DecomposedRealization
        ``eig(A_s)`` lies inside and ``eig(A_u)`` outside the unit disk.

    Raises
    ------
    UnitCircleError
        Eigenvalue too close to the unit circle.
    numpy.linalg.LinAlgError
        Schur reordering or Sylvester solve failed.
    """
    A = model.A
    n = model.n
    if n:
        moduli = np.abs(np.linalg.eigvals(A))
        bad = np.abs(moduli - 1.0) < unit_circle_tol
        if np.any(bad):
            raise UnitCircleError(f"eigenvalue moduli {moduli[bad]} within {unit_circle_tol:g} of 1")
    if n == 0:
        raise DimensionError("cannot decompose a model with zero states")

    R, V, ns = sla.schur(A, output="real", sort="iuc")
    A11, A12, A22 = R[:ns, :ns], R[:ns, ns:], R[ns:, ns:]
    if ns and np.max(np.abs(np.linalg.eigvals(A11))) >= 1.0:
        raise np.linalg.LinAlgError("Schur reordering left an unstable eigenvalue in the leading block")
    if ns < n and np.min(np.abs(np.linalg.eigvals(A22))) <= 1.0:
        raise np.linalg.LinAlgError("Schur reordering left a stable eigenvalue in the trailing block")

    # A11 S - S A22 = -A12; both blocks are already quasi-triangular.
    if ns and ns < n:
        X, scale, info = dtrsyl(A11, A22, -A12, isgn=-1)
        if info < 0:
            raise np.linalg.LinAlgError(f"dtrsyl failed with info={info}")
        S = X / scale
    else:
        S = np.zeros((ns, n - ns))
    resid = float(np.linalg.norm(A11 @ S - S @ A22 + A12)) if S.size else 0.0
    anorm = float(np.linalg.norm(A, 2))
    if resid > 1e-10 * max(anorm, 1.0) * max(1.0, float(np.linalg.norm(S))):
        raise np.linalg.LinAlgError(f"Sylvester residual {resid:.3e} too large")

    W = np.eye(n)
    W[:ns, ns:] = S
    W_inv = np.eye(n)
    W_inv[:ns, ns:] = -S
    T = V @ W
    T_inv = W_inv @ V.T

    Bd = T_inv @ model.B
    Bwd = T_inv @ model.Bw
    Cd = model.C @ T
    A_s = A11.copy()
    A_u = A22.copy()
    rho_s = spectral_radius(A_s)
    rho_u_inv = spectral_radius(np.linalg.inv(A_u)) if n - ns else 0.0
    return DecomposedRealization(
        A_s=_frozen(A_s),
        A_u=_frozen(A_u),
        B_s=_frozen(Bd[:ns]),
        B_u=_frozen(Bd[ns:]),
        B_sw=_frozen(Bwd[:ns]),
        B_uw=_frozen(Bwd[ns:]),
        C_s=_frozen(Cd[:, :ns]),
        C_u=_frozen(Cd[:, ns:]),
        T=_frozen(T),
        T_inv=_frozen(T_inv),
        rho_s=rho_s,
        rho_u_inv=rho_u_inv,
        sylvester_residual=resid,
    )


@dataclass(frozen=True, eq=False)
class LaurentBlock:
    """Truncated two-sided coefficient block ``[H_{-d}, ..., H_0, ..., H_r]``.

    ``coeffs`` has shape ``(r + d + 1, m, p)``; ``coeffs[d + i]`` is ``H_i``.
    """

    r: int
    d: int
    coeffs: np.ndarray

    def __post_init__(self):
        if self.r < 0 or self.d < 0:
            raise DomainError(f"horizons must be nonnegative, got r={self.r}, d={self.d}")
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[0] != self.r + self.d + 1:
            raise DimensionError(f"coeffs must have shape (r+d+1, m, p), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DomainError("Laurent coefficients must be finite")
        object.__setattr__(self, "coeffs", _frozen(c))

    @property
    def mu(self) -> int:
        return self.r + self.d + 1

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.d, self.r + 1)

    def __getitem__(self, lag: int) -> np.ndarray:
        if not -self.d <= lag <= self.r:
            raise IndexError(f"lag {lag} outside [-{self.d}, {self.r}]")
        return self.coeffs[lag + self.d]

    @property
    def theta(self) -> np.ndarray:
        """Row-block flattening ``[H_{-d} ... H_r]`` of shape ``(m, p * mu)``."""
        return np.concatenate(list(self.coeffs), axis=1)

    @classmethod
    def from_theta(cls, theta, r: int, d: int) -> "LaurentBlock":
        theta = np.asarray(theta, dtype=float)
        mu = r + d + 1
        m, cols = theta.shape
        if cols % mu:
            raise DimensionError(f"theta has {cols} columns, not a multiple of mu={mu}")
        p = cols // mu
        return cls(r, d, theta.reshape(m, mu, p).transpose(1, 0, 2))

    def to_csv(self, path, columns=("lag_index", "row", "col", "value")) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for lag, H in zip(self.lags, self.coeffs):
                for i in range(H.shape[0]):
                    for j in range(H.shape[1]):
                        w.writerow([int(lag), i, j, repr(float(H[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "LaurentBlock":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataFormatError(f"{path}: empty file")
        header = rows[0]
        try:
            il = header.index("lag_index")
            ir = header.index("row") if "row" in header else header.index("out_row")
            ic = header.index("col") if "col" in header else header.index("in_col")
            iv = header.index("value")
        except ValueError as exc:
            raise DataFormatError(f"{path}: missing column ({exc})") from exc
        entries = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                entries.append((int(row[il]), int(row[ir]), int(row[ic]), float(row[iv])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        if not entries:
            raise DataFormatError(f"{path}: no coefficient rows")
        lags = [e[0] for e in entries]
        d, r = -min(lags), max(lags)
        m = max(e[1] for e in entries) + 1
        p = max(e[2] for e in entries) + 1
        coeffs = np.zeros((r + d + 1, m, p))
        for lag, i, j, v in entries:
            coeffs[lag + d, i, j] = v
        return cls(r, d, coeffs)


def _two_sided(C_s, A_s, B_s, C_u, A_u, B_u, direct, r, d) -> np.ndarray:
    m, p = direct.shape
    out = np.zeros((r + d + 1, m, p))
    X = B_s.copy()
    for i in range(1, r + 1):
        out[d + i] = C_s @ X
        X = A_s @ X
    out[d] = direct
    if A_u.shape[0]:
        # Repeated solves against A_u: only decaying powers of inv(A_u) are formed.
        lu = sla.lu_factor(A_u)
        X = sla.lu_solve(lu, B_u)
        out[d] = direct - C_u @ X
        for j in range(1, d + 1):
            X = sla.lu_solve(lu, X)
            out[d - j] = -C_u @ X
    return out


def laurent_input_coeffs(dec: DecomposedRealization, D, r: int, d: int) -> LaurentBlock:
    """Two-sided coefficients ``H_{-d} .. H_r`` of ``u -> y``.

    ``H_i = C_s A_s^{i-1} B_s`` (i >= 1), ``H_0 = D - C_u A_u^{-1} B_u`` and
    ``H_{-j} = -C_u A_u^{-j-1} B_u``.
    """
    if r < 0 or d < 0:
        raise DomainError(f"horizons must be nonnegative, got r={r}, d={d}")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    coeffs = _two_sided(dec.C_s, dec.A_s, dec.B_s, dec.C_u, dec.A_u, dec.B_u, D, r, d)
    return LaurentBlock(r, d, coeffs)


def laurent_noise_coeffs(dec: DecomposedRealization, r: int, d: int) -> LaurentBlock:
    """Two-sided coefficients ``F_{-d} .. F_r`` of the disturbance map ``w -> y``."""
    if r < 0 or d < 0:
        raise DomainError(f"horizons must be nonnegative, got r={r}, d={d}")
    zero = np.zeros((dec.C_s.shape[0], dec.B_sw.shape[1]))
    coeffs = _two_sided(dec.C_s, dec.A_s, dec.B_sw, dec.C_u, dec.A_u, dec.B_uw, zero, r, d)
    return LaurentBlock(r, d, coeffs)


def laurent_coeffs(model: StateSpaceModel, r: int, d: int) -> LaurentBlock:
    """Shortcut: decompose ``model`` and return its input coefficients."""
    return laurent_input_coeffs(decompose(model, model.unit_circle_tol), model.D, r, d)


def truncated_fir_response(block: LaurentBlock, u) -> tuple[np.ndarray, np.ndarray]:
    """Output of the truncated two-sided FIR model ``sum_{i=-d}^{r} H_i u(k-i)``.

    Only indices ``k`` with full support (``r <= k <= len(u) - 1 - d``) are
    returned.

    Returns
    -------
    k : ndarray of int
    y : ndarray, shape (len(k), m)
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    L = u.shape[0]
    p = block.coeffs.shape[2]
    if u.shape[1] != p:
        raise DimensionError(f"input has {u.shape[1]} channels, block expects {p}")
    N = L - block.r - block.d
    if N < 1:
        raise IndexError(f"input of length {L} too short for r={block.r}, d={block.d}")
    ks = np.arange(block.r, block.r + N)
    y = np.zeros((N, block.coeffs.shape[1]))
    for lag, H in zip(block.lags, block.coeffs):
        y += u[ks - lag] @ H.T
    return ks, y


@dataclass(frozen=True, eq=False)
class TruncationTailReport:
    r: int
    d: int
    stable_tail_norm: float
    unstable_tail_norm: float
    phi_s: float
    phi_u: float
    k: Optional[np.ndarray] = field(default=None, repr=False)
    e_s: Optional[np.ndarray] = field(default=None, repr=False)
    e_u: Optional[np.ndarray] = field(default=None, repr=False)


def truncation_tails(dec: DecomposedRealization, r: int, d: int, x_s=None, x_u=None) -> TruncationTailReport:
    """Causal tail ``C_s A_s^r x_s(k-r)`` and non-causal tail ``C_u A_u^{-d-1} x_u(k+d+1)``.

    Norms are spectral. When state sequences are given (rows indexed by time),
    the per-sample tails are returned for every ``k`` with ``k - r >= 0`` and
    ``k + d + 1`` inside the sequence.
    """
    if r < 0 or d < 0:
        raise DomainError(f"horizons must be nonnegative, got r={r}, d={d}")
    Gs = dec.C_s @ np.linalg.matrix_power(dec.A_s, r) if dec.n_s else dec.C_s
    if dec.n_u:
        lu = sla.lu_factor(dec.A_u)
        X = np.eye(dec.n_u)
        for _ in range(d + 1):
            X = sla.lu_solve(lu, X)
        Gu = dec.C_u @ X
    else:
        Gu = dec.C_u
    sn = float(np.linalg.norm(Gs, 2)) if Gs.size else 0.0
    un = float(np.linalg.norm(Gu, 2)) if Gu.size else 0.0
    phi_s = transient_amplification(dec.A_s) if dec.n_s else 1.0
    phi_u = transient_amplification(dec.A_u_inv) if dec.n_u else 1.0

    k = e_s = e_u = None
    if x_s is not None or x_u is not None:
        if x_s is None or x_u is None:
            raise DimensionError("supply both x_s and x_u")
        x_s = np.asarray(x_s, dtype=float).reshape(len(x_s), dec.n_s)
        x_u = np.asarray(x_u, dtype=float).reshape(len(x_u), dec.n_u)
        if len(x_s) != len(x_u):
            raise DimensionError("x_s and x_u must have equal length")
        L = len(x_s)
        k = np.arange(r, L - d - 1)
        if k.size == 0:
            raise IndexError(f"state sequence of length {L} too short for r={r}, d={d}")
        e_s = x_s[k - r] @ Gs.T
        e_u = x_u[k + d + 1] @ Gu.T
    return TruncationTailReport(r, d, sn, un, phi_s, phi_u, k, e_s, e_u)
