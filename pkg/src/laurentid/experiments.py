"""Seeded Monte-Carlo experiments, rate fitting, trajectory ingestion and result export.

Two presets are built in: ``example1`` (seventh-order plant with three
unstable poles under LQR) and ``example4`` (third-order diagonal plant under
one LQR and seven pole-placement controllers).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.signal as ss

from .control import (
    Controller,
    LinearStateFeedback,
    NoiseSpec,
    Trajectory,
    ZeroController,
    closed_loop_matrices,
    controller_from_dict,
    design_lqr,
    design_pole_placement,
    load_controller,
    sigma_v_for_snr,
    simulate_closed_loop,
    t_infinity,
)
from .errors import ConditioningError, DataFormatError, DomainError, InstabilityError
from .estimation import RegressorConfig, batch_iv, batch_ls, build_matrices, instrument_diagnostics
from .lti import StateSpaceModel, decompose, laurent_coeffs, load_model, spectral_radius

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ExperimentConfig",
    "ResultTable",
    "RateFit",
    "example1_plant",
    "example4_plant",
    "preset",
    "load_config",
    "run_error_vs_N",
    "run_controller_sweep",
    "run_experiment",
    "fit_rate",
    "import_trajectory",
    "export_results",
]

log = logging.getLogger(__name__)

SWEEP_RHO = tuple(np.linspace(0.50, 0.96, 7))
# secondary closed-loop poles of the pole-placement designs, relative to rho_cl
SWEEP_POLE_RATIOS = (1.0, 0.97, 0.94)


def example1_plant() -> StateSpaceModel:
    """Seventh-order plant with stable poles -0.6, -0.5, +-0.4j and unstable poles 1.5, 1.6, 1.7."""
    num = np.polymul(np.polymul([1.0, 0.0, 0.09], [1.0, 0.2]), [1.0, -0.2])
    den = np.real(np.poly([-0.6, -0.5, 0.4j, -0.4j, 1.7, 1.6, 1.5]))
    A, B, C, D = ss.tf2ss(num, den)
    return StateSpaceModel(A, B, C, D)


def example4_plant() -> StateSpaceModel:
    """``A = diag(0.3, 1.5, 2)``, ``B = 1``, ``C = 1'``; process noise enters through ``B``."""
    return StateSpaceModel(np.diag([0.3, 1.5, 2.0]), np.ones((3, 1)), np.ones((1, 3)))


def _example1_controllers(model):
    return {"lqr": design_lqr(model, np.eye(7), np.eye(1))}


def _example4_controllers(model):
    ctrls = {"lqr": design_lqr(model, np.eye(3), np.eye(1))}
    for rho in SWEEP_RHO:
        ctrls[f"pp_{rho:.3f}"] = design_pole_placement(model, [k * rho for k in SWEEP_POLE_RATIOS])
    return ctrls


_PRESETS = {
    "example1": dict(
        plant=example1_plant,
        controllers=_example1_controllers,
        defaults=dict(snr=[1.0, 10.0, 50.0, 100.0], N_grid=[500, 1000, 2000, 4000, 8000, 16000], r=25, d=25, sigma_w=0.0),
    ),
    "example4": dict(
        plant=example4_plant,
        controllers=_example4_controllers,
        defaults=dict(
            snr=[20.0],
            N_grid=[50, 100, 200, 400, 800, 1600, 3200, 6400],
            r=20,
            d=20,
            sigma_w=1.0,
            kind="controller_sweep",
        ),
    ),
}


def preset(name: str) -> tuple[StateSpaceModel, dict]:
    """Plant and named controllers of a preset."""
    if name not in _PRESETS:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    entry = _PRESETS[name]
    model = entry["plant"]()
    return model, entry["controllers"](model)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``snr`` is a list of levels; ``sigma_v`` (if set) replaces SNR scaling.

    ``controller`` is ``None`` (every controller of the preset), a preset
    controller name, ``"zero"``, or a path to a controller JSON file.
    """

    plant: str = "example1"
    controller: Optional[str] = None
    kind: str = "error_vs_N"
    snr: tuple = (10.0, 100.0)
    sigma_c: float = 1.0
    sigma_w: float = 0.0
    sigma_v: Optional[float] = None
    N_grid: tuple = (500, 1000, 2000, 4000, 8000)
    r: int = 25
    d: int = 25
    trials: int = 20
    base_seed: int = 0
    estimators: tuple = ("iv", "ls")
    output_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr", tuple(float(s) for s in (self.snr or ())))
        object.__setattr__(self, "N_grid", tuple(int(n) for n in self.N_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.trials < 1:
            raise DomainError("trials must be at least 1")
        if not self.N_grid or any(b <= a for a, b in zip(self.N_grid, self.N_grid[1:])):
            raise DomainError(f"N grid must be nonempty and strictly increasing, got {self.N_grid}")
        if self.kind not in ("error_vs_N", "controller_sweep"):
            raise DomainError(f"unknown experiment kind {self.kind!r}")
        if self.sigma_v is None and not self.snr:
            raise DomainError("give SNR levels or sigma_v")
        if any(e not in ("iv", "ls") for e in self.estimators):
            raise DomainError(f"estimators must be among 'iv', 'ls', got {self.estimators}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DomainError(f"unknown configuration keys: {sorted(unknown)}")
        base = dict(_PRESETS.get(doc.get("plant", cls.plant), {}).get("defaults", {}))
        base.update(doc)
        return cls(**base)

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        doc = asdict(self)
        known = set(doc)
        for item in overrides:
            if "=" not in item:
                raise DomainError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in known:
                raise DomainError(f"unknown configuration key {key!r}")
            try:
                doc[key] = json.loads(raw)
            except json.JSONDecodeError:
                doc[key] = raw
        return ExperimentConfig(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    """Read a TOML or JSON experiment document."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def _resolve_plant(cfg: ExperimentConfig):
    if cfg.plant in _PRESETS:
        return preset(cfg.plant)
    return load_model(cfg.plant), {}


def _resolve_controllers(cfg: ExperimentConfig, model, available: dict) -> dict:
    if cfg.controller is None:
        if not available:
            raise DomainError("a plant loaded from file needs an explicit controller")
        return available
    if cfg.controller in available:
        return {cfg.controller: available[cfg.controller]}
    if cfg.controller == "zero":
        return {"zero": ZeroController(model.p)}
    return {Path(cfg.controller).stem: load_controller(cfg.controller)}


ROW_FIELDS = (
    "controller",
    "snr",
    "N",
    "trial",
    "seed",
    "estimator",
    "error",
    "s_iv",
    "lambda_iv",
    "t_infinity",
    "sigma_v",
    "elapsed",
    "status",
)


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str, **where) -> np.ndarray:
        return np.array([row[name] for row in self.select(**where)])

    def select(self, **where) -> list:
        return [row for row in self.rows if all(row[k] == v for k, v in where.items())]

    def cells(self) -> list[tuple]:
        seen = []
        for row in self.rows:
            key = (row["controller"], row["snr"], row["estimator"])
            if key not in seen:
                seen.append(key)
        return seen

    def summary(self, controller, snr, estimator) -> list[tuple]:
        """``(N, median, q25, q75)`` over successful trials of one cell."""
        out = []
        rows = [r for r in self.select(controller=controller, snr=snr, estimator=estimator) if r["status"] == "ok"]
        for N in sorted({r["N"] for r in rows}):
            errs = np.array([r["error"] for r in rows if r["N"] == N])
            out.append((N, float(np.median(errs)), float(np.quantile(errs, 0.25)), float(np.quantile(errs, 0.75))))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    @classmethod
    def from_csv(cls, path) -> "ResultTable":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                for k in ("N", "trial", "seed"):
                    row[k] = int(row[k])
                for k in ("snr", "error", "s_iv", "lambda_iv", "t_infinity", "sigma_v", "elapsed"):
                    row[k] = float(row[k])
                rows.append(row)
        return cls(rows)


def _trial(model, name, ctrl, t_inf, cfg: ExperimentConfig, snr, trial) -> list[dict]:
    """Simulate one trajectory and estimate on every prefix in the N grid."""
    seed = cfg.base_seed + trial
    r, d = cfg.r, cfg.d
    length = cfg.N_grid[-1] + r + d
    base = dict(controller=name, snr=float(snr), trial=trial, seed=seed, t_infinity=t_inf)
    noise = NoiseSpec(cfg.sigma_c, cfg.sigma_w, 0.0, seed)
    rows = []
    try:
        sigma_v = cfg.sigma_v if cfg.sigma_v is not None else sigma_v_for_snr(model, ctrl, noise, length, snr)
        traj = simulate_closed_loop(model, ctrl, replace(noise, sigma_v=sigma_v), length)
    except InstabilityError as exc:
        log.warning("trial %d of %s diverged: %s", trial, name, exc)
        for N in cfg.N_grid:
            for est in cfg.estimators:
                rows.append(dict(base, N=N, estimator=est, error=np.nan, s_iv=np.nan, lambda_iv=np.nan,
                                 sigma_v=np.nan, elapsed=0.0, status="unstable"))
        return rows
    theta = laurent_coeffs(model, r, d).theta
    for N in cfg.N_grid:
        dm = build_matrices(traj, RegressorConfig(r, d, N))
        diag = instrument_diagnostics(dm, cfg.sigma_c) if cfg.sigma_c > 0 else None
        for est in cfg.estimators:
            start = time.perf_counter()
            status, err = "ok", np.nan
            try:
                theta_hat = batch_iv(dm) if est == "iv" else batch_ls(dm)
                err = float(np.linalg.norm(theta_hat - theta, 2))
            except ConditioningError:
                status = "ill_conditioned"
            rows.append(dict(
                base,
                N=N,
                estimator=est,
                error=err,
                s_iv=np.nan if diag is None else diag.s_iv_hat,
                lambda_iv=np.nan if diag is None else diag.lambda_iv_hat,
                sigma_v=float(sigma_v),
                elapsed=time.perf_counter() - start,
                status=status,
            ))
    return rows


def _trial_packed(args):
    return _trial(*args)


def _run(cfg: ExperimentConfig, controllers: dict, model) -> ResultTable:
    levels = cfg.snr if cfg.sigma_v is None else (0.0,)  # snr column 0: fixed sigma_v
    tasks = []
    for name, ctrl in controllers.items():
        t_inf = t_infinity(model, ctrl).value if ctrl.linear else float("nan")
        for snr in levels:
            for trial in range(cfg.trials):
                tasks.append((model, name, ctrl, t_inf, cfg, snr, trial))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_trial_packed, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        chunks = [_trial(*task) for task in tasks]
    return ResultTable([row for chunk in chunks for row in chunk])


def run_error_vs_N(cfg: ExperimentConfig) -> ResultTable:
    """Batch IV (and LS) errors against the exact two-sided coefficients, per SNR, N and trial.

    A diverging trial is recorded with status ``"unstable"`` and does not
    abort the run.
    """
    model, available = _resolve_plant(cfg)
    controllers = _resolve_controllers(cfg, model, available)
    if cfg.controller is None and len(controllers) > 1:
        controllers = dict([next(iter(controllers.items()))])
    return _run(cfg, controllers, model)


def run_controller_sweep(cfg: ExperimentConfig) -> ResultTable:
    """Every controller of the preset (or the one named) across the N grid."""
    model, available = _resolve_plant(cfg)
    return _run(cfg, _resolve_controllers(cfg, model, available), model)


def run_experiment(cfg: ExperimentConfig) -> ResultTable:
    table = run_controller_sweep(cfg) if cfg.kind == "controller_sweep" else run_error_vs_N(cfg)
    if cfg.output_dir:
        export_results(table, cfg.output_dir, config=cfg)
    return table


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_points: int


def fit_rate(points, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> RateFit:
    """Log-log least-squares slope of the per-N median, with a bootstrap CI over trials.

    ``points`` is a sequence of ``(N, value)`` pairs; several values per ``N``
    are treated as trials.

    Raises
    ------
    DataFormatError
        If a value is not positive or fewer than four distinct ``N`` are given.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if np.any(~np.isfinite(pts)) or np.any(pts <= 0):
        raise DataFormatError("rate fitting needs finite positive N and values")
    Ns = np.unique(pts[:, 0])
    if Ns.size < 4:
        raise DataFormatError(f"rate fitting needs at least 4 distinct N, got {Ns.size}")
    groups = [pts[pts[:, 0] == N, 1] for N in Ns]
    x = np.log(Ns)

    def slope_of(gs):
        med = np.log([np.median(g) for g in gs])
        s, c = np.polyfit(x, med, 1)
        return s, c

    slope, intercept = slope_of(groups)
    rng = np.random.default_rng(seed)
    boots = np.array([slope_of([rng.choice(g, size=g.size) for g in groups])[0] for _ in range(n_boot)])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boots, [alpha, 1 - alpha])
    return RateFit(float(slope), float(intercept), float(lo), float(hi), int(pts.shape[0]))


def import_trajectory(path, mode: str = "iv") -> Trajectory:
    """Load a measured trajectory CSV (``k, u_*, y_*`` and, for IV, ``c_*``).

    Raises
    ------
    DataFormatError
        For malformed files, or a missing excitation column when ``mode`` is IV.
    """
    traj = Trajectory.from_csv(path)
    if mode in ("iv", "riv") and traj.c is None:
        raise DataFormatError(f"{path}: IV estimation requires the excitation columns c_0, c_1, ...")
    return traj


def export_results(table: ResultTable, out_dir, config: Optional[ExperimentConfig] = None, extra: Optional[dict] = None) -> Path:
    """Write ``results.csv``, ``diagnostics.json`` and ``plotdata/*.csv``."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "results.csv")
    diag = {"config": None if config is None else config.to_dict(), "controllers": {}}
    for name in dict.fromkeys(r["controller"] for r in table.rows):
        rows = table.select(controller=name)
        lam = [r["lambda_iv"] for r in rows if r["status"] == "ok" and np.isfinite(r["lambda_iv"])]
        diag["controllers"][name] = {
            "t_infinity": rows[0]["t_infinity"],
            "median_lambda_iv": float(np.median(lam)) if lam else None,
            "unstable_trials": len({r["trial"] for r in rows if r["status"] == "unstable"}),
        }
    if extra:
        diag.update(extra)
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, default=float))
    for controller, snr, est in table.cells():
        tag = f"{controller}_snr{snr:g}_{est}"
        with open(out / "plotdata" / f"{tag}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "median_error", "q25", "q75"])
            for N, med, q25, q75 in table.summary(controller, snr, est):
                wr.writerow([N, repr(med), repr(q25), repr(q75)])
    return out


def closed_loop_radius(model: StateSpaceModel, ctrl: Controller) -> float:
    return spectral_radius(closed_loop_matrices(model, ctrl)[0])
