import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laurentid.control import NoiseSpec, Trajectory, ZeroController, design_lqr, simulate_closed_loop
from laurentid.errors import ConditioningError, DataFormatError, DomainError, WeakInstrumentError
from laurentid.estimation import (
    DelayedRecursiveEstimator,
    RegressorConfig,
    batch_iv,
    batch_ls,
    block_regressor,
    build_matrices,
    disturbance_matrix,
    init_recursive_state,
    instrument_diagnostics,
    riv_step,
    rls_step,
    run_recursive,
)
from laurentid.lti import StateSpaceModel, laurent_coeffs


def _traj(u, y, c=None):
    u = np.atleast_2d(np.asarray(u, float).T).T
    y = np.atleast_2d(np.asarray(y, float).T).T
    c = None if c is None else np.atleast_2d(np.asarray(c, float).T).T
    return Trajectory(u=u, y=y, c=c)


def test_block_regressor_orders_most_future_first():
    s = np.arange(10.0)
    Phi = block_regressor(s, r=2, d=1, N=3)
    # column j <-> k = r + j, rows [s(k+1), s(k), s(k-1), s(k-2)]
    np.testing.assert_array_equal(Phi[:, 0], [3, 2, 1, 0])
    np.testing.assert_array_equal(Phi[:, 2], [5, 4, 3, 2])


def test_too_short_trajectory_raises_index_error():
    t = _traj(np.ones(10), np.ones(10))
    with pytest.raises(IndexError):
        build_matrices(t, RegressorConfig(5, 5, 4))


def _fir_data(rng, r, d, N, p=1, m=1):
    theta = rng.standard_normal((m, p * (r + d + 1)))
    u = rng.standard_normal((N + r + d, p))
    Phi = block_regressor(u, r, d, N)
    y = np.zeros((N + r + d, m))
    y[r : r + N] = (theta @ Phi).T
    return theta, _traj(u, y, u.copy())


def test_exact_fir_recovered_without_noise():
    rng = np.random.default_rng(0)
    theta, traj = _fir_data(rng, 3, 2, 200, p=2, m=2)
    dm = build_matrices(traj, RegressorConfig(3, 2))
    np.testing.assert_allclose(batch_ls(dm), theta, atol=1e-10)
    np.testing.assert_allclose(batch_iv(dm), theta, atol=1e-10)


def test_open_loop_iv_equals_ls():
    model = StateSpaceModel([[0.5]], [[1.0]], [[1.0]])
    traj = simulate_closed_loop(model, ZeroController(1), NoiseSpec(1, 0.3, 0.3, 2), 800)
    dm = build_matrices(traj, RegressorConfig(6, 4))
    np.testing.assert_allclose(batch_iv(dm), batch_ls(dm), atol=1e-10, rtol=0)


def test_constant_input_is_rank_deficient():
    t = _traj(np.ones(100), np.arange(100.0), np.ones(100))
    dm = build_matrices(t, RegressorConfig(2, 2))
    with pytest.raises(ConditioningError):
        batch_ls(dm)
    with pytest.raises(WeakInstrumentError):
        batch_iv(dm)


def test_zero_excitation_is_a_weak_instrument():
    rng = np.random.default_rng(1)
    t = _traj(rng.standard_normal(100), rng.standard_normal(100), np.zeros(100))
    with pytest.raises(WeakInstrumentError):
        batch_iv(build_matrices(t, RegressorConfig(2, 2)))


def test_iv_error_equals_disturbance_projection(ex4):
    """theta_IV - theta = E Phi_c' (Phi Phi_c')^{-1} with E assembled from recorded noises and states."""
    model, dec = ex4
    r = d = 8
    traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1, 0.7, 0.4, 5), 700, dec)
    cfg = RegressorConfig(r, d, 700 - r - d - 1)
    dm = build_matrices(traj, cfg, include_ground_truth=True)
    theta = laurent_coeffs(model, r, d).theta
    E = disturbance_matrix(traj, cfg, dec)
    np.testing.assert_allclose(dm.Psi_y, theta @ dm.Phi + E, atol=1e-9)
    G = dm.Phi @ dm.Phi_c.T
    np.testing.assert_allclose(batch_iv(dm) - theta, E @ dm.Phi_c.T @ np.linalg.inv(G), atol=1e-8)


def test_instrument_diagnostics_open_loop_near_identity():
    model = StateSpaceModel([[0.5]], [[1.0]], [[1.0]])
    traj = simulate_closed_loop(model, ZeroController(1), NoiseSpec(2.0, 0, 0.1, 3), 4000)
    dm = build_matrices(traj, RegressorConfig(3, 3), include_ground_truth=True)
    diag = instrument_diagnostics(dm, 2.0)
    assert np.linalg.norm(diag.R_uc_hat - 4.0 * np.eye(7), 2) < 1.0
    assert diag.triangularity_residual == 0.0
    assert np.all(diag.U_hat == 0)


def test_instrument_diagnostics_reject_zero_sigma_c():
    rng = np.random.default_rng(0)
    t = _traj(rng.standard_normal(50), rng.standard_normal(50), rng.standard_normal(50))
    with pytest.raises(DomainError):
        instrument_diagnostics(build_matrices(t, RegressorConfig(1, 1)), 0.0)


def test_closed_loop_feedback_block_is_strictly_upper(ex4):
    model, dec = ex4
    traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1, 0, 0, 1), 20000, dec)
    dm = build_matrices(traj, RegressorConfig(3, 3), include_ground_truth=True)
    diag = instrument_diagnostics(dm, 1.0)
    norms = diag.block_norms("S_fc_hat")
    assert diag.triangularity_residual < 0.05
    assert norms[0, 1] > 0.2  # f(k+d) depends on c(k+d-1)


def _regularized_batch(dm, eta, lam=1.0, iv=True):
    N = dm.N
    w = lam ** np.arange(N - 1, -1, -1)
    Z = dm.Phi_c if iv else dm.Phi
    S = lam**N * eta * np.eye(dm.Phi.shape[0]) + (dm.Phi * w) @ Z.T
    M = (dm.Psi_y * w) @ Z.T
    return np.linalg.solve(S.T, M.T).T


@pytest.mark.parametrize("lam", [1.0, 0.995])
def test_recursive_iv_equals_regularized_weighted_batch(ex4, lam):
    model, dec = ex4
    traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1, 0.5, 0.5, 4), 500, dec)
    cfg = RegressorConfig(4, 3)
    hist = run_recursive(traj, cfg, "iv", lambda_f=lam, eta=1e-2)
    ref = _regularized_batch(build_matrices(traj, cfg), 1e-2, lam)
    np.testing.assert_allclose(hist.theta, ref, rtol=1e-7, atol=1e-9)


def test_recursive_ls_equals_regularized_batch(ex4):
    model, dec = ex4
    traj = simulate_closed_loop(model, design_lqr(model), NoiseSpec(1, 0.5, 0.5, 4), 500, dec)
    cfg = RegressorConfig(4, 3)
    hist = run_recursive(traj, cfg, "ls", eta=1e-3)
    ref = _regularized_batch(build_matrices(traj, cfg), 1e-3, iv=False)
    np.testing.assert_allclose(hist.theta, ref, rtol=1e-8, atol=1e-10)


def test_update_for_k_fires_when_sample_k_plus_d_arrives():
    r, d = 2, 3
    est = DelayedRecursiveEstimator(r, d, 1, 1, mode="ls", eta=1.0)
    rng = np.random.default_rng(0)
    fired = [est.push(rng.standard_normal(), rng.standard_normal()) for _ in range(12)]
    assert fired[: r + d] == [None] * (r + d)
    assert fired[r + d :] == list(range(r, 12 - d))
    assert all(t - k == d for t, k in est.update_log)


def test_estimate_never_uses_samples_beyond_arrival():
    rng = np.random.default_rng(3)
    u, y, c = rng.standard_normal((3, 40))
    r, d = 2, 4
    a = DelayedRecursiveEstimator(r, d, 1, 1, mode="iv", eta=0.1)
    b = DelayedRecursiveEstimator(r, d, 1, 1, mode="iv", eta=0.1)
    for t in range(25):
        a.push(u[t], y[t], c[t])
        b.push(u[t], y[t], c[t])
    snapshot = a.theta.copy()
    # a wild sample at t = 25 only touches the update for k = 25 - d
    b.push(1e6, -1e6, 3e5)
    a.push(u[25], y[25], c[25])
    assert a.update_log == b.update_log
    assert a.update_log[-1] == (25, 25 - d)
    c2 = DelayedRecursiveEstimator(r, d, 1, 1, mode="iv", eta=0.1)
    for t in range(25):
        c2.push(u[t], y[t], c[t])
    np.testing.assert_array_equal(c2.theta, snapshot)


def test_zero_delay_is_causal_rls():
    rng = np.random.default_rng(5)
    u, y = rng.standard_normal((2, 30))
    est = DelayedRecursiveEstimator(3, 0, 1, 1, mode="ls", eta=1.0)
    for t in range(30):
        k = est.push(u[t], y[t])
        assert k is None or k == t


def test_riv_denominator_guard_skips_update(caplog):
    state = init_recursive_state(2, 1, eta=1.0)
    phi = np.array([1.0, 0.0])
    z = np.array([-1.0, 0.0])  # 1 + z' P phi = 0
    new = riv_step(state, phi, z, [1.0])
    assert new.skipped == 1
    np.testing.assert_array_equal(new.theta, state.theta)
    np.testing.assert_array_equal(new.P, state.P)
    assert "skipped" in caplog.text


def test_non_finite_data_rejected():
    state = init_recursive_state(2, 1, eta=1.0)
    with pytest.raises(DataFormatError):
        rls_step(state, [np.nan, 1.0], [0.0])


def test_forgetting_factor_domain():
    with pytest.raises(DomainError):
        init_recursive_state(2, 1, eta=1.0, lambda_f=1.2)


def test_iv_mode_requires_excitation():
    rng = np.random.default_rng(0)
    t = _traj(rng.standard_normal(40), rng.standard_normal(40))
    with pytest.raises(DataFormatError):
        run_recursive(t, RegressorConfig(1, 1), "iv", eta=1.0)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    lam=st.floats(0.9, 1.0),
    steps=st.integers(1, 30),
    iv=st.booleans(),
)
def test_tracked_accumulators_reproduce_estimate(seed, lam, steps, iv):
    rng = np.random.default_rng(seed)
    n = 4
    state = init_recursive_state(n, 2, eta=1.0, lambda_f=lam, track=True)
    for _ in range(steps):
        phi = rng.standard_normal(n)
        y = rng.standard_normal(2)
        state = riv_step(state, phi, phi + 0.3 * rng.standard_normal(n), y) if iv else rls_step(state, phi, y)
    np.testing.assert_allclose(state.P @ state.S_acc, np.eye(n), atol=1e-6)
    np.testing.assert_allclose(state.theta, state.M_acc @ state.P, atol=1e-6 * (1 + np.abs(state.theta).max()))
