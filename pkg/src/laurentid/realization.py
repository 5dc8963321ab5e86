"""Ho-Kalman realization of the two halves of a Laurent block and frequency responses.

The causal half ``H_1, H_2, ...`` is realized directly. The non-causal half
is realized in reverse time: ``M_j = -H_{-j} = C_u A_u^{-j-1} B_u`` has the
Markov form ``C_r A_r^{j-1} B_r`` with ``A_r = A_u^{-1}``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, DomainError, RankError, RealizationError
from .lti import LaurentBlock, StateSpaceModel, spectral_radius

__all__ = [
    "HankelSpec",
    "PartialRealization",
    "ReconstructedModel",
    "ho_kalman",
    "ho_kalman_causal",
    "ho_kalman_noncausal",
    "reconstruct",
    "frequency_grid",
    "frequency_response",
    "response_mismatch",
    "save_frequency_response",
    "save_reconstruction",
    "load_reconstruction",
]

GAP_RATIO = 1e3
ZERO_LEVEL = 1e-13


@dataclass(frozen=True)
class HankelSpec:
    """Hankel block dimensions and target order.

    ``rows``/``cols`` default to ``floor(available / 2)``. ``order="auto"``
    picks the largest singular-value gap and refuses if its ratio is below
    ``gap_ratio``.
    """

    rows: Optional[int] = None
    cols: Optional[int] = None
    order: Union[int, str] = "auto"
    gap_ratio: float = GAP_RATIO

    def resolve(self, available: int) -> tuple[int, int]:
        rows = available // 2 if self.rows is None else self.rows
        cols = available // 2 if self.cols is None else self.cols
        if rows < 1 or cols < 1:
            raise DomainError(f"need at least two coefficients for a Hankel matrix, have {available}")
        if rows + cols > available:
            raise DomainError(f"rows + cols = {rows + cols} exceeds {available} available coefficients")
        return rows, cols


@dataclass(frozen=True, eq=False)
class PartialRealization:
    """Realization ``(A, B, C)`` of one half plus the Hankel singular values used."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    singular_values: np.ndarray
    rows: int
    cols: int

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def markov(self, count: int) -> np.ndarray:
        out = np.empty((count,) + (self.C.shape[0], self.B.shape[1]))
        X = self.B
        for i in range(count):
            out[i] = self.C @ X
            X = self.A @ X
        return out


def _select_order(sv: np.ndarray, spec: HankelSpec, limit: int) -> int:
    if sv.size == 0 or sv[0] <= ZERO_LEVEL:
        return 0
    if spec.order != "auto":
        n = int(spec.order)
        if n < 0 or n > limit:
            raise DomainError(f"order {n} outside [0, {limit}]")
        rank = int(np.sum(sv > sv[0] * 1e-12))
        if n > rank:
            raise RankError(
                f"requested order {n} exceeds numerical rank {rank}; singular values {sv[: n + 1]}",
                singular_values=sv,
            )
        return n
    # roundoff-level values are floored so that ratios among them stay small
    floored = np.maximum(sv, sv[0] * 1e-14)
    ratios = floored[:-1] / floored[1:]
    if ratios.size == 0:
        return sv.size
    n = int(np.argmax(ratios)) + 1
    if not ratios[n - 1] >= spec.gap_ratio:
        raise RankError(
            f"no singular-value gap of ratio {spec.gap_ratio:g} (largest {ratios[n - 1]:.3g}); specify the order",
            singular_values=sv,
        )
    return n


def ho_kalman(markov, spec: HankelSpec = HankelSpec()) -> PartialRealization:
    """Balanced realization from Markov parameters ``M_1, M_2, ...`` (array ``(K, m, p)``).

    The Hankel matrix has block ``(i, j) = M_{i+j+1}``; its one-step shift
    gives ``A = Sigma^{-1/2} U' H_shift V Sigma^{-1/2}`` on the retained
    singular directions.
    """
    M = np.asarray(markov, dtype=float)
    if M.ndim != 3:
        raise DimensionError(f"expected an array of shape (K, m, p), got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError("Markov parameters must be finite")
    K, m, p = M.shape
    rows, cols = spec.resolve(K)
    H = np.block([[M[i + j] for j in range(cols)] for i in range(rows)])
    Hs = np.block([[M[i + j + 1] for j in range(cols)] for i in range(rows)])
    U, sv, Vt = np.linalg.svd(H)
    n = _select_order(sv, spec, min(rows * m, cols * p))
    if n == 0:
        return PartialRealization(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((m, 0)), sv, rows, cols)
    root = np.sqrt(sv[:n])
    Un, Vn = U[:, :n], Vt[:n].T
    O = Un * root
    R = (Vn * root).T
    A = (Un / root).T @ Hs @ (Vn / root)
    return PartialRealization(A, R[:, :p], O[:m], sv, rows, cols)


def ho_kalman_causal(coeffs, spec: HankelSpec = HankelSpec()) -> PartialRealization:
    """Realize ``(A_s, B_s, C_s)`` from ``H_1, ..., H_r``."""
    return ho_kalman(coeffs, spec)


def ho_kalman_noncausal(coeffs, spec: HankelSpec = HankelSpec()) -> PartialRealization:
    """Realize ``(A_u, B_u, C_u)`` from ``H_{-1}, ..., H_{-d}`` (given in that order).

    Raises
    ------
    RealizationError
        If the reverse-time state matrix is singular.
    """
    M = -np.asarray(coeffs, dtype=float)
    rev = ho_kalman(M, spec)
    if rev.order == 0:
        return rev
    sv = np.linalg.svd(rev.A, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise RealizationError(f"reverse-time state matrix is singular (sigma_min = {sv[-1]:.3e})")
    A_u = np.linalg.inv(rev.A)
    return PartialRealization(A_u, A_u @ rev.B, rev.C @ A_u, rev.singular_values, rev.rows, rev.cols)


@dataclass(frozen=True, eq=False)
class ReconstructedModel:
    """``G(z) = C_s (zI - A_s)^{-1} B_s + C_u (zI - A_u)^{-1} B_u + D``."""

    stable: PartialRealization
    unstable: PartialRealization
    D: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.D.shape[0]

    @property
    def p(self) -> int:
        return self.D.shape[1]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.linalg.eigvals(self.stable.A), np.linalg.eigvals(self.unstable.A)])

    def as_state_space(self) -> StateSpaceModel:
        A = sla.block_diag(self.stable.A, self.unstable.A)
        B = np.vstack([self.stable.B, self.unstable.B])
        C = np.hstack([self.stable.C, self.unstable.C])
        return StateSpaceModel(A, B, C, self.D)

    def transfer(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        out = np.broadcast_to(self.D.astype(complex), z.shape + self.D.shape).copy()
        for part in (self.stable, self.unstable):
            if part.order == 0:
                continue
            n = part.order
            for idx in np.ndindex(z.shape):
                out[idx] += part.C @ np.linalg.solve(z[idx] * np.eye(n) - part.A, part.B)
        return out

    def laurent(self, r: int, d: int) -> LaurentBlock:
        """Two-sided coefficients implied by the realized halves."""
        m, p = self.m, self.p
        coeffs = np.zeros((r + d + 1, m, p))
        if self.unstable.order:
            Ainv = np.linalg.inv(self.unstable.A)
            X = Ainv @ self.unstable.B
            coeffs[d] = self.D - self.unstable.C @ X
            for j in range(1, d + 1):
                X = Ainv @ X
                coeffs[d - j] = -self.unstable.C @ X
        else:
            coeffs[d] = self.D
        if r:
            coeffs[d + 1 :] = self.stable.markov(r)
        return LaurentBlock(r, d, coeffs)

    def to_dict(self) -> dict:
        def part(pr: PartialRealization):
            return {"A": pr.A.tolist(), "B": pr.B.tolist(), "C": pr.C.tolist()}

        return {
            "parts": {"stable": part(self.stable), "unstable": part(self.unstable), "D": self.D.tolist()},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReconstructedModel":
        parts = doc["parts"]
        D = np.atleast_2d(np.asarray(parts["D"], dtype=float))
        m, p = D.shape

        def part(d):
            n = len(d["A"])
            A = np.asarray(d["A"], dtype=float).reshape(n, n)
            B = np.asarray(d["B"], dtype=float).reshape(n, p)
            C = np.asarray(d["C"], dtype=float).reshape(m, n)
            return PartialRealization(A, B, C, np.zeros(0), 0, 0)

        return cls(part(parts["stable"]), part(parts["unstable"]), D, doc.get("provenance", {}))


def reconstruct(
    theta_hat: LaurentBlock,
    spec_s: HankelSpec = HankelSpec(),
    spec_u: HankelSpec = HankelSpec(),
) -> ReconstructedModel:
    """Realize both halves of ``theta_hat`` and recover the feedthrough.

    ``D_hat = H_0 + C_u A_u^{-1} B_u``. A realized half whose spectrum falls
    on the wrong side of the unit circle (possible with noisy coefficients)
    triggers a warning and is recorded in the provenance.
    """
    r, d = theta_hat.r, theta_hat.d
    m, p = theta_hat.coeffs.shape[1:]
    if r >= 2:
        stable = ho_kalman_causal(theta_hat.coeffs[d + 1 :], spec_s)
    else:
        stable = PartialRealization(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((m, 0)), np.zeros(0), 0, 0)
    if d >= 2:
        unstable = ho_kalman_noncausal(theta_hat.coeffs[d - 1 :: -1], spec_u)
    else:
        unstable = PartialRealization(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((m, 0)), np.zeros(0), 0, 0)
    H0 = theta_hat.coeffs[d]
    D = H0 + unstable.C @ np.linalg.solve(unstable.A, unstable.B) if unstable.order else H0.copy()
    rho_s = spectral_radius(stable.A) if stable.order else 0.0
    rho_u_inv = spectral_radius(np.linalg.inv(unstable.A)) if unstable.order else 0.0
    if rho_s >= 1 or rho_u_inv >= 1:
        warnings.warn(
            f"realized halves cross the unit circle (rho_s = {rho_s:.3f}, rho_u_inv = {rho_u_inv:.3f})",
            RuntimeWarning,
            stacklevel=2,
        )
    prov = {
        "r": r,
        "d": d,
        "order_stable": stable.order,
        "order_unstable": unstable.order,
        "hankel_stable": [stable.rows, stable.cols],
        "hankel_unstable": [unstable.rows, unstable.cols],
        "singular_values_stable": stable.singular_values.tolist(),
        "singular_values_unstable": unstable.singular_values.tolist(),
        "rho_s": rho_s,
        "rho_u_inv": rho_u_inv,
    }
    return ReconstructedModel(stable, unstable, D, prov)


def frequency_grid(count: int = 256) -> np.ndarray:
    """Midpoint grid ``pi (k + 1/2) / count`` on ``(0, pi)``."""
    return np.pi * (np.arange(count) + 0.5) / count


def frequency_response(model, omegas) -> np.ndarray:
    """``G(e^{j omega})`` as an array ``(len(omegas), m, p)``.

    Raises
    ------
    FloatingPointError
        If a grid point coincides with a pole.
    """
    z = np.exp(1j * np.asarray(omegas, dtype=float))
    try:
        G = model.transfer(z)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"frequency response evaluated at a pole: {exc}") from exc
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("frequency response evaluated at a pole")
    return G


def response_mismatch(G_ref, G_hat) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude difference in dB and wrapped phase difference in degrees, elementwise."""
    mag = 20 * np.log10(np.abs(G_hat)) - 20 * np.log10(np.abs(G_ref))
    phase = np.degrees(np.angle(G_hat / G_ref))
    return mag, phase


def save_frequency_response(path, omegas, G) -> None:
    """CSV with columns ``omega, out, in, mag_db, phase_deg``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["omega", "out", "in", "mag_db", "phase_deg"])
        for k, om in enumerate(omegas):
            for i in range(G.shape[1]):
                for j in range(G.shape[2]):
                    g = G[k, i, j]
                    wr.writerow([repr(float(om)), i, j, repr(float(20 * np.log10(abs(g)))), repr(float(np.angle(g, deg=True)))])


def save_reconstruction(model: ReconstructedModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


def load_reconstruction(path) -> ReconstructedModel:
    return ReconstructedModel.from_dict(json.loads(Path(path).read_text()))
