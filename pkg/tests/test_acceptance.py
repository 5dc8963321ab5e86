"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the terminal summary."""

import math
import time
from dataclasses import replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from laurentid.bounds import BoundInputs, corollary_horizons, evaluate_helpers, theorem_bound, truncation_scales
from laurentid.control import NoiseSpec, Trajectory, design_lqr, sigma_v_for_snr, simulate_closed_loop
from laurentid.estimation import (
    DelayedRecursiveEstimator,
    RegressorConfig,
    batch_iv,
    batch_ls,
    build_matrices,
    instrument_diagnostics,
    run_recursive,
)
from laurentid.experiments import ExperimentConfig, fit_rate, preset, run_experiment
from laurentid.lti import LaurentBlock, decompose, laurent_input_coeffs, truncated_fir_response, truncation_tails
from laurentid.realization import HankelSpec, frequency_grid, frequency_response, reconstruct, response_mismatch

from conftest import random_split_system, record


def _fft_coeffs(model, lags, M=2**14):
    z = np.exp(2j * np.pi * np.arange(M) / M)
    h = np.fft.ifft(model.transfer(z), axis=0)
    return {lag: h[lag % M].real for lag in lags}


def test_criterion_01_laurent_oracle(ex1):
    model, dec = ex1
    start = time.perf_counter()
    block = laurent_input_coeffs(dec, model.D, 25, 25)
    elapsed = time.perf_counter() - start
    oracle = _fft_coeffs(model, block.lags)
    err = max(np.max(np.abs(block[lag] - oracle[lag])) for lag in block.lags)
    ok = err <= 1e-8 and elapsed < 1.0
    record(1, ok, f"max entry error {err:.2e} (<= 1e-8), {elapsed:.3f}s")
    assert ok


def _recon_error(model, dec):
    z = np.exp(2j * np.pi * (np.arange(64) + 0.25) / 64)
    G = model.transfer(z)
    Gd = dec.stable_transfer(z) + dec.unstable_transfer(z) + model.D
    return np.max(np.abs(G - Gd)) / np.max(np.abs(G))


def test_criterion_02_decomposition_reconstruction(ex1, ex4):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = [_recon_error(*ex1), _recon_error(*ex4)]
    for _ in range(100):
        n_s, n_u = rng.integers(0, 5, 2)
        if n_s + n_u == 0:
            n_s = 1
        model = random_split_system(rng, int(n_s), int(n_u), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        errs.append(_recon_error(model, decompose(model)))
    elapsed = time.perf_counter() - start
    ok = max(errs) <= 1e-9 and elapsed < 10
    record(2, ok, f"worst relative error {max(errs):.2e} over 102 systems (<= 1e-9), {elapsed:.1f}s")
    assert ok


def test_criterion_03_rate_reproduction():
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict(dict(
        plant="example1", snr=[10.0, 100.0], N_grid=[500, 1000, 2000, 4000, 8000], r=25, d=25, trials=20,
        estimators=["iv"],
    ))
    table = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    slopes = {}
    for snr in cfg.snr:
        rows = [r for r in table.select(snr=snr, estimator="iv") if r["status"] == "ok"]
        slopes[snr] = fit_rate([(r["N"], r["error"]) for r in rows], n_boot=200).slope
    ok = all(-0.65 <= s <= -0.35 for s in slopes.values()) and elapsed < 600
    detail = ", ".join(f"SNR {snr:g}: slope {s:+.3f}" for snr, s in slopes.items())
    record(3, ok, f"{detail} (need [-0.65, -0.35]), {elapsed:.0f}s")
    assert ok


def test_criterion_04_closed_loop_bias_separation():
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict(dict(
        plant="example4", controller="lqr", kind="error_vs_N", snr=[20.0], sigma_w=1.0, N_grid=[6400], trials=20,
        estimators=["iv", "ls"],
    ))
    table = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    iv = table.column("error", estimator="iv")
    ls = table.column("error", estimator="ls")
    share = float(np.mean(iv < ls))
    ok = share >= 0.8 and elapsed < 300
    record(4, ok, f"IV < LS in {share:.0%} of 20 seeds (need >= 80%), median IV {np.median(iv):.3g} "
                  f"vs LS {np.median(ls):.3g}, {elapsed:.0f}s")
    assert ok


def test_criterion_05_open_loop_degeneracy(ex1):
    model, dec = ex1
    r = d = 25
    sigma_c = 1.5
    rng = np.random.default_rng(5)
    block = laurent_input_coeffs(dec, model.D, r, d)
    worst_eq, worst_ratio = 0.0, 0.0
    for N in (1000, 2000, 4000, 8000):
        L = N + r + d
        c = sigma_c * rng.standard_normal((L, 1))
        ks, yf = truncated_fir_response(block, c)
        y = np.zeros((L, 1))
        y[ks] = yf
        v = 0.1 * rng.standard_normal((L, 1))
        traj = Trajectory(u=c.copy(), y=y + v, c=c, f=np.zeros_like(c), w=np.zeros_like(c), v=v)
        dm = build_matrices(traj, RegressorConfig(r, d, N), include_ground_truth=True)
        worst_eq = max(worst_eq, float(np.max(np.abs(batch_iv(dm) - batch_ls(dm)))))
        R = instrument_diagnostics(dm, sigma_c).R_uc_hat
        dev = np.linalg.norm(R - sigma_c**2 * np.eye(R.shape[0]), 2)
        limit = 5 * sigma_c**2 * math.sqrt(R.shape[0] / N) * math.sqrt(math.log(N))
        worst_ratio = max(worst_ratio, dev / limit)
    ok = worst_eq <= 1e-10 and worst_ratio <= 1.0
    record(5, ok, f"max |IV - LS| {worst_eq:.1e} (<= 1e-10), worst ||R_uc - s^2 I|| / limit {worst_ratio:.2f} (<= 1)")
    assert ok


def test_criterion_06_triangular_structure(ex4):
    model, dec = ex4
    ctrl = design_lqr(model)
    r = d = 5
    N0 = 500
    Ns = [N0, 2 * N0, 4 * N0, 8 * N0]
    med = []
    for N in Ns:
        vals = []
        for seed in range(20):
            traj = simulate_closed_loop(model, ctrl, NoiseSpec(1.0, 0.5, 0.2, seed), N + r + d, dec)
            dm = build_matrices(traj, RegressorConfig(r, d, N), include_ground_truth=True)
            vals.append(instrument_diagnostics(dm, 1.0).triangularity_residual)
        med.append(float(np.median(vals)))
    c = 1.5 * med[0] * math.sqrt(N0)
    ratios = [m * math.sqrt(N) / c for m, N in zip(med, Ns)]
    ok = all(q <= 1.0 for q in ratios[1:])
    record(6, ok, f"c = {c:.2f}; median max block * sqrt(N) / c at N = {Ns[1:]}: "
                  + ", ".join(f"{q:.2f}" for q in ratios[1:]) + " (<= 1)")
    assert ok


def test_criterion_07_recursive_batch_consistency(ex4):
    model, dec = ex4
    ctrl = design_lqr(model)
    r = d = 20
    N = 2000
    sigma_c = 1.0
    noise = NoiseSpec(sigma_c, 1.0, 0.0, 7)
    sv = sigma_v_for_snr(model, ctrl, noise, N + r + d, 20.0)
    traj = simulate_closed_loop(model, ctrl, replace(noise, sigma_v=sv), N + r + d, dec)
    cfg = RegressorConfig(r, d, N)
    batch = batch_iv(build_matrices(traj, cfg))
    hist = run_recursive(traj, cfg, "iv", lambda_f=1.0, eta=1e-4 * sigma_c**2)
    rel = np.linalg.norm(hist.theta - batch, 2) / np.linalg.norm(batch, 2)
    # streaming order: the update for output k fires exactly when sample k + d arrives
    est = DelayedRecursiveEstimator(r, d, 1, 1, mode="iv", eta=1e-4)
    fired = [est.push(traj.u[t], traj.y[t], traj.c[t]) for t in range(200)]
    order_ok = fired[: r + d] == [None] * (r + d) and fired[r + d :] == list(range(r, 200 - d))
    order_ok = order_ok and all(t - k == d for t, k in est.update_log)
    ok = rel <= 1e-6 and order_ok
    record(7, ok, f"relative gap {rel:.2e} (<= 1e-6), delay contract {'held' if order_ok else 'violated'}")
    assert ok


def test_criterion_08_realization_recovery(ex1):
    model, dec = ex1
    start = time.perf_counter()
    _, ctrls = preset("example1")
    ctrl = ctrls["lqr"]
    r = d = 25
    N = 16000
    noise = NoiseSpec(1.0, 0.0, 0.0, 0)
    sv = sigma_v_for_snr(model, ctrl, noise, N + r + d, 100.0)
    traj = simulate_closed_loop(model, ctrl, replace(noise, sigma_v=sv), N + r + d)
    theta_hat = LaurentBlock.from_theta(batch_iv(build_matrices(traj, RegressorConfig(r, d, N))), r, d)
    rec = reconstruct(theta_hat, HankelSpec(order=4), HankelSpec(order=3))
    true_mod = np.abs(np.linalg.eigvals(model.A))
    got_mod = np.abs(rec.poles())
    cost = np.abs(true_mod[:, None] - got_mod[None, :])
    i, j = linear_sum_assignment(cost)
    pole_err = float(cost[i, j].max())
    om = frequency_grid(256)
    mag, ph = response_mismatch(frequency_response(model, om), frequency_response(rec, om))
    share = float(np.mean((np.abs(mag) <= 1.0) & (np.abs(ph) <= 5.0)))
    elapsed = time.perf_counter() - start
    ok = pole_err <= 1e-2 and share >= 0.9 and elapsed < 120
    record(8, ok, f"worst pole modulus error {pole_err:.3g} (<= 1e-2), response within 1 dB / 5 deg at "
                  f"{share:.0%} of 256 points (>= 90%), {elapsed:.0f}s")
    assert ok


def test_criterion_09_controller_conditioning_ordering():
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict(dict(plant="example4", N_grid=[6400], trials=20, estimators=["iv"]))
    table = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    names = list(dict.fromkeys(r["controller"] for r in table.rows))
    t_inf = np.array([table.select(controller=n)[0]["t_infinity"] for n in names])
    med = np.array([np.nanmedian(table.column("error", controller=n)) for n in names])
    rho = float(spearmanr(t_inf, med)[0])
    lqr, slow = t_inf[names.index("lqr")], t_inf[names.index("pp_0.960")]
    ends_ok = abs(math.log10(lqr / 6.0)) <= 0.5 and abs(math.log10(slow / 1258.0)) <= 0.5
    ok = len(names) == 8 and rho > 0 and ends_ok and elapsed < 900
    record(9, ok, f"Spearman {rho:+.2f} (> 0) over {len(names)} controllers, T_inf {lqr:.2f} (LQR) to "
                  f"{slow:.0f} (rho_cl 0.96), {elapsed:.0f}s")
    assert ok


def _bound_inputs(**kw):
    base = dict(rho_s=0.5, rho_u_inv=0.25, phi_s=2.0, phi_u=3.0, tail_s=0.1, tail_u=0.2, gamma_norm=1.5,
                gamma_cl_s=4.0, gamma_cl_u=9.0, sigma_c=1.0, sigma_w=0.5, sigma_v=0.3, m=1, p=1, l=1, r=2, d=1,
                N=100, delta=0.5, lambda_iv=0.25)
    base.update(kw)
    return BoundInputs(**base)


def test_criterion_10_bound_machinery():
    failures = []
    inp = _bound_inputs()
    h = evaluate_helpers(inp)
    golden = {
        "chi_N": math.log(128) ** 2 * math.log(3200) ** 2,
        "M_v": 5 + math.log(32),
        "D_s": 1 + (2 / 0.75) / 100,
        "M_s": 3 + math.log(96),
        "D_u": 1 + (1 / 0.75) / 100,
        "M_u": 2 + math.log(64),
    }
    failures += [k for k, v in golden.items() if not math.isclose(h[k], v, rel_tol=1e-13)]
    ss, su = truncation_scales(inp)
    want_ss, want_su = 0.2 * math.sqrt(32 / 3), 0.6 * math.sqrt(12.0)
    if not (math.isclose(ss, want_ss, rel_tol=1e-13) and math.isclose(su, want_su, rel_tol=1e-13)):
        failures.append("sigma_e")
    rep = theorem_bound(inp)
    N_w = 8 * math.log(256) ** 2 * math.log(6400) ** 2
    betas = {
        "beta_w": 0.75 * max(math.sqrt(N_w), N_w / 10),
        "beta_v": 0.3 * math.sqrt(golden["M_v"]),
        "beta_es": want_ss * math.sqrt(golden["D_s"] * golden["M_s"]),
        "beta_eu": want_su * math.sqrt(golden["D_u"] * golden["M_u"]),
    }
    failures += [k for k, v in betas.items() if not math.isclose(getattr(rep, k), v, rel_tol=1e-13)]

    rng = np.random.default_rng(10)
    mono = 0
    for _ in range(300):
        case = _bound_inputs(N=int(rng.integers(1, 10**6)), lambda_iv=rng.uniform(0.01, 5), sigma_w=rng.uniform(0, 5),
                             sigma_v=rng.uniform(0, 5), rho_s=rng.uniform(0, 0.95), rho_u_inv=rng.uniform(0, 0.95))
        b = theorem_bound(case).bound_value
        mono += theorem_bound(replace(case, N=2 * case.N)).bound_value > b * (1 + 1e-12)
        mono += theorem_bound(replace(case, lambda_iv=case.lambda_iv / 2)).bound_value < b
        mono += theorem_bound(replace(case, sigma_w=case.sigma_w + 1)).bound_value < b
        mono += theorem_bound(replace(case, sigma_v=case.sigma_v + 1)).bound_value < b

    horizon_bad = 0
    for _ in range(2000):
        rs, ru = rng.uniform(1e-3, 0.999, 2)
        N, eps = int(rng.integers(1, 10**7)), rng.uniform(1e-6, 0.999)
        hs, hu = corollary_horizons(rs, ru, N, eps)
        horizon_bad += (rs**hs > eps / N) + (ru**hu > eps / N)

    ok = not failures and mono == 0 and horizon_bad == 0
    record(10, ok, f"golden mismatches {failures or 'none'}, monotonicity violations {mono}/1200, "
                   f"horizon violations {horizon_bad}/4000")
    assert ok


def test_criterion_11_truncation_decay(ex4):
    model, dec = ex4
    traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1.0, 1.0, 0.0, 11), 6000, dec)

    def rms(r, d):
        t = truncation_tails(dec, r, d, traj.x_s, traj.x_u)
        return np.sqrt(np.mean(t.e_s**2)), np.sqrt(np.mean(t.e_u**2))

    hs = np.arange(2, 13)
    es = [rms(h, 5)[0] for h in hs]
    hu = np.arange(4, 31, 2)
    eu = [rms(5, h)[1] for h in hu]
    slope_s = np.polyfit(hs, np.log(es), 1)[0]
    slope_u = np.polyfit(hu, np.log(eu), 1)[0]
    ref_s, ref_u = math.log(dec.rho_s), math.log(dec.rho_u_inv)
    dev_s, dev_u = abs(slope_s / ref_s - 1), abs(slope_u / ref_u - 1)
    ok = dev_s <= 0.2 and dev_u <= 0.2
    record(11, ok, f"stable log-ratio {slope_s:.3f} vs {ref_s:.3f} ({dev_s:.1%}), "
                   f"non-causal {slope_u:.3f} vs {ref_u:.3f} ({dev_u:.1%}) (within 20%)")
    assert ok
