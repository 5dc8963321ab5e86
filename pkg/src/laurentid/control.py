"""Stabilizing controllers, closed-loop simulation and conditioning diagnostics.

The measured input is ``u(k) = f(k) + c(k)`` with ``f(k)`` produced by a
strictly causal controller and ``c(k)`` a known Gaussian excitation. Every
controller here computes ``f(k)`` before ``y(k)`` exists, so strict causality
holds by construction.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DataFormatError,
    DimensionError,
    DomainError,
    InstabilityError,
    RankError,
    StabilizabilityError,
    UnsupportedError,
)
from .lti import DecomposedRealization, StateSpaceModel, decompose, spectral_radius, transient_amplification

__all__ = [
    "Controller",
    "ZeroController",
    "LinearStateFeedback",
    "LinearOutputFeedback",
    "CallableController",
    "NoiseSpec",
    "Trajectory",
    "ControllerDiagnostics",
    "TInfinity",
    "design_lqr",
    "design_pole_placement",
    "simulate_closed_loop",
    "simulate_with_signals",
    "closed_loop_matrices",
    "t_infinity",
    "closed_loop_moments",
    "sigma_v_for_snr",
    "controller_to_dict",
    "controller_from_dict",
]

log = logging.getLogger(__name__)

STATE_OVERFLOW = 1e12


class Controller:
    """Strictly causal feedback law.

    Subclasses implement ``initial_state``, ``feedback`` (returns ``f(k)`` from
    the controller state and, for state feedback, the plant state ``x(k)``) and
    ``advance`` (consumes ``y(k)`` after ``f(k)`` has been applied).
    """

    def initial_state(self, model: StateSpaceModel):
        return None

    def feedback(self, xc, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def advance(self, xc, y: np.ndarray):
        return xc

    linear = False


@dataclass(frozen=True, eq=False)
class ZeroController(Controller):
    """Open loop: ``f = 0``."""

    p: int = 1
    linear = True

    def feedback(self, xc, x):
        return np.zeros(self.p)


@dataclass(frozen=True, eq=False)
class LinearStateFeedback(Controller):
    """``f(k) = -K x(k)``; the learner never sees ``K``."""

    K: np.ndarray
    linear = True

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    def feedback(self, xc, x):
        return -(self.K @ x)


@dataclass(frozen=True, eq=False)
class LinearOutputFeedback(Controller):
    """Dynamic output feedback ``xc(k+1) = Ac xc(k) + Bc y(k)``, ``f(k) = Cc xc(k)``."""

    Ac: np.ndarray
    Bc: np.ndarray
    Cc: np.ndarray
    linear = True

    def __post_init__(self):
        for name in ("Ac", "Bc", "Cc"):
            a = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        nc = self.Ac.shape[0]
        if self.Ac.shape != (nc, nc) or self.Bc.shape[0] != nc or self.Cc.shape[1] != nc:
            raise DimensionError("inconsistent output-feedback controller matrices")

    def initial_state(self, model):
        if self.Bc.shape[1] != model.m or self.Cc.shape[0] != model.p:
            raise DimensionError("controller dimensions do not match the plant")
        return np.zeros(self.Ac.shape[0])

    def feedback(self, xc, x):
        return self.Cc @ xc

    def advance(self, xc, y):
        return self.Ac @ xc + self.Bc @ y


@dataclass(frozen=True, eq=False)
class CallableController(Controller):
    """Arbitrary (possibly nonlinear) law ``f(k) = fn(y[0:k])``.

    ``fn`` receives the output history as an array of shape ``(k, m)``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    p: int = 1

    def initial_state(self, model):
        return []

    def feedback(self, xc, x):
        hist = np.array(xc).reshape(len(xc), -1)
        return np.asarray(self.fn(hist), dtype=float).reshape(self.p)

    def advance(self, xc, y):
        xc.append(np.array(y))
        return xc


def controller_to_dict(ctrl: Controller) -> dict:
    if isinstance(ctrl, LinearStateFeedback):
        return {"type": "state_feedback", "K": ctrl.K.tolist()}
    if isinstance(ctrl, LinearOutputFeedback):
        return {"type": "output_feedback", "Ac": ctrl.Ac.tolist(), "Bc": ctrl.Bc.tolist(), "Cc": ctrl.Cc.tolist()}
    if isinstance(ctrl, ZeroController):
        return {"type": "zero", "p": ctrl.p}
    raise UnsupportedError(f"cannot serialize controller of type {type(ctrl).__name__}")


def controller_from_dict(doc: dict) -> Controller:
    kind = doc.get("type")
    try:
        if kind == "state_feedback":
            return LinearStateFeedback(doc["K"])
        if kind == "output_feedback":
            return LinearOutputFeedback(doc["Ac"], doc["Bc"], doc["Cc"])
        if kind == "zero":
            return ZeroController(int(doc.get("p", 1)))
    except KeyError as exc:
        raise DataFormatError(f"controller document missing key {exc}") from exc
    raise DataFormatError(f"unknown controller type {kind!r}")


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    sigma_c: float = 1.0
    sigma_w: float = 0.0
    sigma_v: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_c", "sigma_w", "sigma_v"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")


_CHANNELS = ("u", "y", "c", "f", "w", "v", "x")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One closed-loop record; rows are time steps ``0 .. len-1``.

    ``u``, ``y`` are always present, ``c`` whenever the excitation is known.
    The remaining channels are ground truth kept only for analysis.
    """

    u: np.ndarray
    y: np.ndarray
    c: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = field(default=None, repr=False)
    w: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    x: Optional[np.ndarray] = field(default=None, repr=False)
    x_s: Optional[np.ndarray] = field(default=None, repr=False)
    x_u: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        L = None
        for name in _CHANNELS + ("x_s", "x_u"):
            val = getattr(self, name)
            if val is None:
                continue
            a = np.array(val, dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2:
                raise DimensionError(f"channel {name} must be 2-D (time, dim)")
            if L is None:
                L = a.shape[0]
            elif a.shape[0] != L:
                raise DimensionError(f"channel {name} has length {a.shape[0]}, expected {L}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.u is None or self.y is None:
            raise DimensionError("trajectory needs u and y")

    def __len__(self) -> int:
        return self.u.shape[0]

    @property
    def p(self) -> int:
        return self.u.shape[1]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.f is not None

    def head(self, length: int) -> "Trajectory":
        """First ``length`` samples (all channels)."""
        if length > len(self):
            raise IndexError(f"requested {length} samples from a trajectory of length {len(self)}")
        kw = {}
        for name in _CHANNELS + ("x_s", "x_u"):
            val = getattr(self, name)
            kw[name] = None if val is None else val[:length]
        return Trajectory(**kw)

    def to_csv(self, path, ground_truth: bool = True) -> None:
        cols, blocks = ["k"], [np.arange(len(self))[:, None].astype(float)]
        names = ("u", "y", "c") + (("f", "w", "v", "x") if ground_truth else ())
        for name in names:
            val = getattr(self, name)
            if val is None:
                continue
            cols += [f"{name}_{i + 1}" for i in range(val.shape[1])]
            blocks.append(val)
        data = np.hstack(blocks)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in data:
                w.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path, ground_truth: bool = False) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataFormatError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        if not header or header[0] != "k":
            raise DataFormatError(f"{path}:1: header must start with 'k'")
        data = np.empty((len(rows) - 1, len(header)))
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                data[lineno - 2] = [float(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(data[lineno - 2])):
                raise DataFormatError(f"{path}:{lineno}: non-finite entry")
        if data.shape[0] == 0:
            raise DataFormatError(f"{path}: no data rows")
        chans = {}
        for name in _CHANNELS:
            idx = [i for i, h in enumerate(header) if h.split("_")[0] == name and h[len(name):len(name) + 1] == "_"]
            if idx:
                order = sorted(idx, key=lambda i: int(header[i].split("_", 1)[1]))
                chans[name] = data[:, order]
        for req in ("u", "y"):
            if req not in chans:
                raise DataFormatError(f"{path}: missing required columns {req}_1..")
        if not ground_truth:
            chans = {k: v for k, v in chans.items() if k in ("u", "y", "c")}
        return cls(**chans)


def design_lqr(model: StateSpaceModel, Q=None, R=None, tol: float = 1e-10, max_iter: int = 100_000) -> LinearStateFeedback:
    """Infinite-horizon discrete LQR gain by fixed-point Riccati iteration.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`` from ``P = Q`` until
    ``||P_{k+1} - P_k|| <= tol * max(1, ||P_{k+1}||)``.

    Raises
    ------
    StabilizabilityError
        No convergence within ``max_iter`` or the resulting loop is unstable.
    """
    A, B = model.A, model.B
    n, p = model.n, model.p
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(p) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if Q.shape != (n, n) or R.shape != (p, p):
        raise DimensionError("Q must be n x n and R p x p")
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12:
        raise DomainError("Q must be positive semidefinite")
    if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
        raise DomainError("R must be positive definite")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = (P_next + P_next.T) / 2
        if not np.all(np.isfinite(P_next)):
            break
        delta = np.linalg.norm(P_next - P)
        P = P_next
        if delta <= tol * max(1.0, np.linalg.norm(P)):
            BtP = B.T @ P
            K = np.linalg.solve(R + BtP @ B, BtP @ A)
            rho = spectral_radius(A - B @ K)
            if rho >= 1.0:
                raise StabilizabilityError(f"Riccati fixed point gives rho(A - BK) = {rho:.6g} >= 1")
            return LinearStateFeedback(K)
    raise StabilizabilityError(f"Riccati iteration did not converge in {max_iter} iterations")


def design_pole_placement(model: StateSpaceModel, target_poles: Sequence[complex], tol: float = 1e-6) -> LinearStateFeedback:
    """Single-input pole placement by Ackermann's formula.

    Returns ``K`` with ``eig(A - B K)`` equal to ``target_poles``.
    """
    A, B = model.A, model.B
    n = model.n
    if model.p != 1:
        raise UnsupportedError("Ackermann pole placement supports single-input plants only")
    poles = np.asarray(target_poles, dtype=complex)
    if poles.size != n:
        raise DimensionError(f"need {n} target poles, got {poles.size}")
    coeffs = np.poly(poles)
    if np.max(np.abs(coeffs.imag)) > 1e-9:
        raise DomainError("target poles must be closed under complex conjugation")
    coeffs = coeffs.real
    ctrb = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(n)])
    sv = np.linalg.svd(ctrb, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise RankError("(A, B) is not controllable", singular_values=sv)
    char_A = np.zeros((n, n))
    for a in coeffs:
        char_A = char_A @ A + a * np.eye(n)
    e_n = np.zeros(n)
    e_n[-1] = 1.0
    K = np.linalg.solve(ctrb.T, e_n)[None, :] @ char_A
    achieved = np.linalg.eigvals(A - B @ K)
    if not _multiset_close(achieved, poles, tol):
        raise np.linalg.LinAlgError(f"pole placement inaccurate: got {np.sort_complex(achieved)}")
    return LinearStateFeedback(K)


def _multiset_close(a, b, tol) -> bool:
    from scipy.optimize import linear_sum_assignment

    cost = np.abs(np.asarray(a)[:, None] - np.asarray(b)[None, :])
    rows, cols = linear_sum_assignment(cost)
    return bool(np.max(cost[rows, cols]) <= tol * max(1.0, np.max(np.abs(b))))


def simulate_with_signals(
    model: StateSpaceModel,
    ctrl: Controller,
    c,
    w=None,
    v=None,
    dec: Optional[DecomposedRealization] = None,
) -> Trajectory:
    """Run the closed loop on given excitation and noise sequences.

    ``x(0) = 0``. For each ``k``: ``f(k)`` from the controller, ``u = f + c``,
    ``y = C x + D u + v``, then the controller sees ``y(k)`` and the plant
    advances. Ground-truth channels are recorded, including the decoupled
    states when ``dec`` is given or the model can be decomposed.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float).T).T
    L = c.shape[0]
    if c.shape[1] != model.p:
        raise DimensionError(f"excitation has {c.shape[1]} channels, plant has p={model.p}")
    w = np.zeros((L, model.l)) if w is None else np.atleast_2d(np.asarray(w, dtype=float).T).T
    v = np.zeros((L, model.m)) if v is None else np.atleast_2d(np.asarray(v, dtype=float).T).T
    if w.shape != (L, model.l) or v.shape != (L, model.m):
        raise DimensionError("noise sequences do not match plant dimensions or length")

    A, B, Bw, C, D = model.A, model.B, model.Bw, model.C, model.D
    X = np.zeros((L, model.n))
    U = np.zeros((L, model.p))
    Y = np.zeros((L, model.m))
    F = np.zeros((L, model.p))
    x = np.zeros(model.n)
    xc = ctrl.initial_state(model)
    limit = STATE_OVERFLOW**2
    for k in range(L):
        f = ctrl.feedback(xc, x)
        u = f + c[k]
        y = C @ x + D @ u + v[k]
        X[k], U[k], Y[k], F[k] = x, u, y, f
        xc = ctrl.advance(xc, y)
        x = A @ x + B @ u + Bw @ w[k]
        if not x @ x <= limit:
            raise InstabilityError(
                f"state norm exceeded {STATE_OVERFLOW:g} at index {k + 1}; closed loop is not stable",
                index=k + 1,
            )
    if dec is None:
        try:
            dec = decompose(model, model.unit_circle_tol)
        except Exception:  # decoupled states are optional
            dec = None
    xs = xu = None
    if dec is not None:
        xs, xu = dec.split_state(X)
    return Trajectory(u=U, y=Y, c=c, f=F, w=w, v=v, x=X, x_s=xs, x_u=xu)


def draw_signals(model: StateSpaceModel, noise: NoiseSpec, length: int):
    """Seeded Gaussian draws in fixed order ``c, w, v`` (scaled after drawing)."""
    rng = np.random.default_rng(noise.seed)
    c = rng.standard_normal((length, model.p)) * noise.sigma_c
    w = rng.standard_normal((length, model.l)) * noise.sigma_w
    v = rng.standard_normal((length, model.m)) * noise.sigma_v
    return c, w, v


def simulate_closed_loop(
    model: StateSpaceModel,
    ctrl: Controller,
    noise: NoiseSpec,
    length: int,
    dec: Optional[DecomposedRealization] = None,
) -> Trajectory:
    """Simulate ``length`` samples (indices ``0 .. length-1``) of the closed loop.

    Raises
    ------
    InstabilityError
        If the state norm passes ``1e12``; the message names the first index.
    """
    if length < 1:
        raise DomainError("length must be positive")
    if ctrl.linear and not isinstance(ctrl, ZeroController):
        rho = spectral_radius(closed_loop_matrices(model, ctrl)[0])
        if rho >= 1.0:
            log.warning("closed-loop spectral radius %.4g >= 1; simulation will likely diverge", rho)
    c, w, v = draw_signals(model, noise, length)
    return simulate_with_signals(model, ctrl, c, w, v, dec=dec)


def sigma_v_for_snr(model: StateSpaceModel, ctrl: Controller, noise: NoiseSpec, length: int, snr: float) -> float:
    """Measurement-noise level giving ``var(y_clean) / sigma_v**2 = snr``.

    ``y_clean`` comes from a pilot run with the same excitation and no
    process or measurement noise; the variance is averaged over outputs.
    """
    if snr <= 0:
        raise DomainError("SNR must be positive")
    c, _, _ = draw_signals(model, noise, length)
    clean = simulate_with_signals(model, ctrl, c)
    return float(np.sqrt(np.mean(np.var(clean.y, axis=0)) / snr))


def closed_loop_matrices(model: StateSpaceModel, ctrl: Controller):
    """Closed-loop ``(A_cl, B_c, C_f)``: state matrix, excitation input, feedback output."""
    A, B, C, D = model.A, model.B, model.C, model.D
    if isinstance(ctrl, ZeroController):
        return A, B, np.zeros((model.p, model.n))
    if isinstance(ctrl, LinearStateFeedback):
        K = ctrl.K
        if K.shape != (model.p, model.n):
            raise DimensionError(f"K has shape {K.shape}, expected {(model.p, model.n)}")
        return A - B @ K, B, -K
    if isinstance(ctrl, LinearOutputFeedback):
        Ac, Bc, Cc = ctrl.Ac, ctrl.Bc, ctrl.Cc
        nc = Ac.shape[0]
        Acl = np.block([[A, B @ Cc], [Bc @ C, Ac + Bc @ D @ Cc]])
        Bcl = np.vstack([B, Bc @ D])
        Cf = np.hstack([np.zeros((model.p, model.n)), Cc])
        assert Acl.shape == (model.n + nc, model.n + nc)
        return Acl, Bcl, Cf
    raise UnsupportedError(
        f"{type(ctrl).__name__} is not linear; use Monte-Carlo cross-covariance diagnostics instead"
    )


@dataclass(frozen=True, eq=False)
class TInfinity:
    """Summed excitation-to-feedback impulse-response norm.

    ``value`` is the computed partial sum; ``tail_bound`` bounds what the
    truncation left out.
    """

    value: float
    tail_bound: float
    terms: int
    rho_cl: float


def t_infinity(model: StateSpaceModel, ctrl: Controller, term_tol: float = 1e-12, max_terms: int = 1_000_000) -> TInfinity:
    """Sum ``||T_s||`` over the closed-loop response ``T_s = C_f A_cl^{s-1} B_c`` from ``c`` to ``f``."""
    if isinstance(ctrl, ZeroController):
        return TInfinity(0.0, 0.0, 0, spectral_radius(model.A))
    Acl, Bc, Cf = closed_loop_matrices(model, ctrl)
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise DomainError(f"closed loop is not stable (rho_cl = {rho:.6g})")
    ncl = Acl.shape[0]
    total = 0.0
    X = Bc.copy()
    s = 0
    while s < max_terms:
        s += 1
        term = np.linalg.norm(Cf @ X, 2)
        total += term
        X = Acl @ X
        if term < term_tol and s >= ncl:
            break
    phi = transient_amplification(Acl)
    tail = np.linalg.norm(Cf, 2) * np.linalg.norm(Bc, 2) * phi * rho ** (s / 2) / (1 - np.sqrt(rho))
    return TInfinity(float(total), float(tail), s, rho)


@dataclass(frozen=True, eq=False)
class ControllerDiagnostics:
    gamma_cl: float
    gamma_cl_s: float
    gamma_cl_u: float
    rho_cl: Optional[float] = None
    t_infinity: Optional[float] = None
    t_infinity_tail: Optional[float] = None


def _sup_second_moment(states: np.ndarray, window: int) -> float:
    # states: (trials, L, n)
    if states.shape[-1] == 0:
        return 0.0
    outer = np.einsum("tki,tkj->kij", states, states) / states.shape[0]
    if window > 1:
        if window > outer.shape[0]:
            raise DomainError("moment window longer than the trajectories")
        cs = np.cumsum(outer, axis=0)
        cs = np.concatenate([np.zeros((1,) + outer.shape[1:]), cs])
        outer = (cs[window:] - cs[:-window]) / window
    return float(np.max(np.linalg.eigvalsh((outer + np.swapaxes(outer, 1, 2)) / 2)[:, -1]))


def closed_loop_moments(
    trajectories: Sequence[Trajectory],
    dec: Optional[DecomposedRealization] = None,
    model: Optional[StateSpaceModel] = None,
    ctrl: Optional[Controller] = None,
    window: int = 1,
) -> ControllerDiagnostics:
    """Empirical ``sup_k ||E[x x']||`` for the full, stable and unstable states.

    The expectation is the mean over trajectories; ``window > 1`` additionally
    averages over a sliding time window, which makes single-trajectory
    estimates meaningful for (near-)stationary loops.
    """
    if not trajectories:
        raise DataFormatError("need at least one trajectory")
    for t in trajectories:
        if t.x is None:
            raise DataFormatError("trajectories lack ground-truth states")
    L = min(len(t) for t in trajectories)
    X = np.stack([t.x[:L] for t in trajectories])
    if dec is not None:
        xs, xu = dec.split_state(X)
    else:
        if any(t.x_s is None for t in trajectories):
            raise DataFormatError("trajectories lack decoupled states and no decomposition given")
        xs = np.stack([t.x_s[:L] for t in trajectories])
        xu = np.stack([t.x_u[:L] for t in trajectories])
    g = _sup_second_moment(X, window)
    gs = _sup_second_moment(xs, window)
    gu = _sup_second_moment(xu, window)
    rho = tinf = tail = None
    if model is not None and ctrl is not None and ctrl.linear:
        ti = t_infinity(model, ctrl)
        rho, tinf, tail = ti.rho_cl, ti.value, ti.tail_bound
    return ControllerDiagnostics(g, gs, gu, rho, tinf, tail)


def save_controller(ctrl: Controller, path) -> None:
    Path(path).write_text(json.dumps(controller_to_dict(ctrl), indent=2))


def load_controller(path) -> Controller:
    try:
        return controller_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
