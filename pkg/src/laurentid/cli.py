"""Command-line entry point ``laurentid``.

Subcommands: simulate, identify, realize, bound, experiment, diagnose.
Exit status is 0 on success, 1 for domain errors and 2 for I/O or parse
errors; failures print one line to stderr prefixed by the subcommand.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION, __version__
from .bounds import BoundInputs, UniversalConstants, save_bound_report, system_constants, theorem_bound
from .control import (
    NoiseSpec,
    ZeroController,
    closed_loop_moments,
    load_controller,
    sigma_v_for_snr,
    simulate_closed_loop,
    t_infinity,
)
from .errors import DataFormatError, DomainError
from .estimation import (
    RegressorConfig,
    batch_iv,
    batch_ls,
    build_matrices,
    instrument_diagnostics,
    run_recursive,
    save_estimate,
)
from .experiments import ExperimentConfig, export_results, import_trajectory, load_config, preset, run_experiment
from .lti import LaurentBlock, decompose, load_model
from .realization import (
    HankelSpec,
    frequency_grid,
    frequency_response,
    reconstruct,
    save_frequency_response,
    save_reconstruction,
)

log = logging.getLogger("laurentid")


def _plant_and_controller(plant: str, controller):
    if plant.endswith(".json"):
        model, available = load_model(plant), {}
    else:
        model, available = preset(plant)
    if controller is None:
        if not available:
            raise DomainError("give --controller for a plant loaded from file")
        name = next(iter(available))
        return model, available[name]
    if controller in available:
        return model, available[controller]
    if controller == "zero":
        return model, ZeroController(model.p)
    return model, load_controller(controller)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc


def cmd_simulate(args) -> None:
    model, ctrl = _plant_and_controller(args.plant, args.controller)
    noise = NoiseSpec(args.sigma_c, args.sigma_w, 0.0, args.seed)
    sigma_v = args.sigma_v
    if args.snr is not None:
        sigma_v = sigma_v_for_snr(model, ctrl, noise, args.length, args.snr)
    traj = simulate_closed_loop(model, ctrl, dataclasses.replace(noise, sigma_v=sigma_v or 0.0), args.length)
    traj.to_csv(args.out, ground_truth=args.ground_truth)
    print(f"wrote {args.out} ({args.length} samples, sigma_v = {sigma_v or 0.0:.6g})")


def identify(traj, mode: str, r: int, d: int, lambda_f: float = 1.0, eta=None, sigma_c=None):
    """Estimate ``theta`` and instrument diagnostics exactly as the CLI does."""
    cfg = RegressorConfig(r, d)
    diag = None
    if mode in ("ls", "iv"):
        dm = build_matrices(traj, cfg)
        theta = batch_iv(dm) if mode == "iv" else batch_ls(dm)
        if dm.Phi_c is not None:
            sc = sigma_c if sigma_c is not None else float(np.std(traj.c))
            if sc > 0:
                diag = instrument_diagnostics(dm, sc)
    elif mode in ("rls", "riv"):
        hist = run_recursive(traj, cfg, "ls" if mode == "rls" else "iv", lambda_f, eta, sigma_c=sigma_c)
        theta = hist.theta
    else:
        raise DomainError(f"unknown mode {mode!r}")
    return theta, diag


def cmd_identify(args) -> None:
    traj = import_trajectory(args.trajectory, mode=args.mode)
    theta, diag = identify(traj, args.mode, args.r, args.d, args.lambda_f, args.eta, args.sigma_c)
    out = Path(args.out)
    save_estimate(theta, args.r, args.d, out)
    doc = {"mode": args.mode, "r": args.r, "d": args.d, "N": len(traj) - args.r - args.d}
    if diag is not None:
        doc.update(diag.to_dict())
    Path(args.diagnostics or out.with_suffix(".json")).write_text(json.dumps(doc, indent=2))
    print(f"wrote {out}")


def cmd_realize(args) -> None:
    block = LaurentBlock.from_csv(args.estimate)
    order = lambda v: "auto" if v in (None, "auto") else int(v)
    rec = reconstruct(block, HankelSpec(order=order(args.order_s)), HankelSpec(order=order(args.order_u)))
    save_reconstruction(rec, args.out)
    if args.freq_out:
        om = frequency_grid(args.grid)
        save_frequency_response(args.freq_out, om, frequency_response(rec, om))
    print(f"wrote {args.out} (orders {rec.stable.order} + {rec.unstable.order})")


def bound_inputs_from_doc(doc: dict, trials: int = 20, seed: int = 0) -> BoundInputs:
    """Build bound inputs from a JSON document.

    With ``plant`` (and optionally ``controller``) the system constants are
    computed and missing closed-loop moments / instrument strength are
    estimated from ``trials`` simulated trajectories of length ``N + r + d``.
    """
    doc = dict(doc)
    if "delta" in doc and not 0 < doc["delta"] < 1:
        raise DomainError(f"delta must lie in (0, 1), got {doc['delta']}")
    consts = UniversalConstants(**doc.pop("constants", {}))
    plant = doc.pop("plant", None)
    controller = doc.pop("controller", None)
    if plant is not None:
        model, ctrl = _plant_and_controller(plant, controller)
        dec = decompose(model)
        r, d, N = int(doc["r"]), int(doc["d"]), int(doc["N"])
        for key, value in system_constants(dec, r, d).items():
            doc.setdefault(key, value)
        doc.setdefault("m", model.m)
        doc.setdefault("p", model.p)
        doc.setdefault("l", model.l)
        need_moments = "gamma_cl_s" not in doc or "gamma_cl_u" not in doc
        need_strength = "lambda_iv" not in doc and "s_iv" not in doc
        if need_moments or need_strength:
            noise = NoiseSpec(doc.get("sigma_c", 1.0), doc.get("sigma_w", 0.0), doc.get("sigma_v", 0.0), seed)
            trajs = [
                simulate_closed_loop(model, ctrl, dataclasses.replace(noise, seed=seed + t), N + r + d, dec)
                for t in range(trials)
            ]
            if need_moments:
                mom = closed_loop_moments(trajs, dec)
                doc.setdefault("gamma_cl_s", mom.gamma_cl_s)
                doc.setdefault("gamma_cl_u", mom.gamma_cl_u)
            if need_strength:
                lams = [instrument_diagnostics(build_matrices(t, RegressorConfig(r, d, N)), noise.sigma_c).lambda_iv_hat for t in trajs]
                doc["lambda_iv"] = float(np.median(lams))
    known = {f.name for f in dataclasses.fields(BoundInputs)}
    unknown = set(doc) - known
    if unknown:
        raise DomainError(f"unknown bound keys: {sorted(unknown)}")
    try:
        return BoundInputs(constants=consts, **doc)
    except TypeError as exc:
        raise DataFormatError(f"incomplete bound configuration: {exc}") from exc


def cmd_bound(args) -> None:
    doc = _read_json(args.config)
    inp = bound_inputs_from_doc(doc, trials=args.trials or 20, seed=args.seed)
    report = theorem_bound(inp)
    save_bound_report(report, args.out, extra={"inputs": {k: v for k, v in dataclasses.asdict(inp).items()}})
    print(f"wrote {args.out} (bound {report.bound_value:.6g}, sample size satisfied: {report.sample_size_satisfied})")


def cmd_experiment(args) -> None:
    cfg = load_config(args.config)
    overrides = list(args.overrides)
    if args.trials is not None:
        overrides.append(f"trials={args.trials}")
    if args.seed_given:
        overrides.append(f"base_seed={args.seed}")
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    cfg = cfg.with_overrides(overrides)
    if cfg.output_dir is None:
        cfg = dataclasses.replace(cfg, output_dir=str(Path(args.config).with_suffix("")) + "_results")
    table = run_experiment(cfg)
    print(f"wrote {len(table)} rows to {cfg.output_dir}")


def cmd_diagnose(args) -> None:
    model, ctrl = _plant_and_controller(args.plant, args.controller)
    doc = {"controller": dataclasses.asdict(t_infinity(model, ctrl)) if ctrl.linear else None}
    if args.trajectory:
        traj = import_trajectory(args.trajectory, mode="iv")
        dm = build_matrices(traj, RegressorConfig(args.r, args.d), include_ground_truth=traj.has_ground_truth)
        sc = args.sigma_c if args.sigma_c is not None else float(np.std(traj.c))
        doc["instrument"] = instrument_diagnostics(dm, sc).to_dict()
    Path(args.out).write_text(json.dumps(doc, indent=2))
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="laurentid", description="Closed-loop identification of two-sided FIR models.")
    ap.add_argument("--version", action="version", version=f"laurentid {__version__} (schema {SCHEMA_VERSION})")
    ap.add_argument("--seed", type=int, default=None, help="base random seed")
    ap.add_argument("--trials", type=int, default=None, help="Monte-Carlo trials")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a closed loop and write a trajectory CSV")
    p.add_argument("--plant", default="example4", help="preset name or model JSON")
    p.add_argument("--controller", default=None, help="preset controller name, 'zero', or controller JSON")
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--sigma-c", type=float, default=1.0)
    p.add_argument("--sigma-w", type=float, default=0.0)
    p.add_argument("--sigma-v", type=float, default=0.0)
    p.add_argument("--snr", type=float, default=None, help="set sigma_v from a noiseless pilot run")
    p.add_argument("--ground-truth", action="store_true", help="also write f, w, v and states")
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", help="estimate a two-sided FIR block from a trajectory CSV")
    p.add_argument("trajectory")
    p.add_argument("--mode", choices=("ls", "iv", "rls", "riv"), default="iv")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--lambda-f", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--sigma-c", type=float, default=None)
    p.add_argument("--out", default="estimate.csv")
    p.add_argument("--diagnostics", default=None)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("realize", help="Ho-Kalman realization of an estimate CSV")
    p.add_argument("estimate")
    p.add_argument("--order-s", default="auto")
    p.add_argument("--order-u", default="auto")
    p.add_argument("--grid", type=int, default=256)
    p.add_argument("--out", default="model.json")
    p.add_argument("--freq-out", default="frequency_response.csv")
    p.set_defaults(func=cmd_realize)

    p = sub.add_parser("bound", help="evaluate the finite-sample error bound")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="bound.json")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("experiment", help="run an experiment described by a TOML/JSON file")
    p.add_argument("config")
    p.add_argument("overrides", nargs="*", help="key=value overrides")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("diagnose", help="instrument strength and controller conditioning")
    p.add_argument("trajectory", nargs="?")
    p.add_argument("--plant", default="example4")
    p.add_argument("--controller", default=None)
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--sigma-c", type=float, default=None)
    p.add_argument("--out", default="diagnostics.json")
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        args.func(args)
    except DomainError as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError, KeyError, IndexError) as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
