import json

import numpy as np
import pytest

from laurentid.control import NoiseSpec, ZeroController, simulate_closed_loop
from laurentid.errors import DataFormatError, DomainError
from laurentid.estimation import RegressorConfig, run_recursive
from laurentid.experiments import (
    ExperimentConfig,
    ResultTable,
    export_results,
    fit_rate,
    import_trajectory,
    load_config,
    preset,
    run_experiment,
)
from laurentid.lti import StateSpaceModel


def _small(**kw):
    base = dict(plant="example4", controller="lqr", kind="error_vs_N", snr=[20.0], N_grid=[100, 200, 400, 800],
                r=6, d=6, trials=3)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_fit_rate_exact_power_law():
    Ns = [100, 200, 400, 800, 1600]
    fit = fit_rate([(N, 3.0 * N**-0.5) for N in Ns], n_boot=50)
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log(3.0), abs=1e-12)
    assert fit.ci_low == pytest.approx(-0.5) and fit.ci_high == pytest.approx(-0.5)


def test_fit_rate_constant_is_flat():
    assert fit_rate([(N, 2.0) for N in (10, 20, 40, 80)], n_boot=10).slope == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_rejects_bad_input():
    with pytest.raises(DataFormatError):
        fit_rate([(10, 1.0), (20, 0.0), (40, 1.0), (80, 1.0)])
    with pytest.raises(DataFormatError):
        fit_rate([(10, 1.0), (20, 1.0), (40, 1.0)])


def test_config_from_toml_and_json_agree(tmp_path):
    (tmp_path / "c.toml").write_text('plant = "example4"\ntrials = 2\nN_grid = [100, 200]\n')
    (tmp_path / "c.json").write_text(json.dumps({"plant": "example4", "trials": 2, "N_grid": [100, 200]}))
    a, b = load_config(tmp_path / "c.toml"), load_config(tmp_path / "c.json")
    assert a == b
    assert a.kind == "controller_sweep" and a.r == 20  # preset defaults fill the rest


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(DomainError, match="unknown"):
        ExperimentConfig.from_dict({"plant": "example1", "horizon": 3})
    (tmp_path / "bad.toml").write_text("trials = [\n")
    with pytest.raises(DataFormatError):
        load_config(tmp_path / "bad.toml")


def test_overrides_parse_values():
    cfg = _small().with_overrides(["trials=5", "snr=[1, 2]", "controller=zero"])
    assert cfg.trials == 5 and cfg.snr == (1.0, 2.0) and cfg.controller == "zero"
    with pytest.raises(DomainError):
        _small().with_overrides(["nonsense=1"])
    with pytest.raises(DomainError):
        _small().with_overrides(["trials"])


def test_unknown_preset():
    with pytest.raises(DomainError):
        preset("example9")


def test_same_config_same_table():
    a, b = run_experiment(_small()), run_experiment(_small())
    np.testing.assert_array_equal(a.column("error"), b.column("error"))


def test_trials_are_isolated():
    """Adding trials never changes the rows of existing ones."""
    a = run_experiment(_small(trials=2))
    b = run_experiment(_small(trials=3))
    for t in (0, 1):
        np.testing.assert_array_equal(a.column("error", trial=t), b.column("error", trial=t))
    assert len(b) == 3 * 4 * 2


def test_export_layout_and_csv_round_trip(tmp_path):
    table = run_experiment(_small(trials=2))
    export_results(table, tmp_path)
    again = ResultTable.from_csv(tmp_path / "results.csv")
    np.testing.assert_array_equal(again.column("error"), table.column("error"))
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["controllers"]["lqr"]["t_infinity"] == pytest.approx(6.05, abs=0.01)
    lines = (tmp_path / "plotdata" / "lqr_snr20_iv.csv").read_text().splitlines()
    assert lines[0] == "N,median_error,q25,q75" and len(lines) == 5


def test_import_requires_excitation_for_iv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("k,u_0,y_0\n0,1.0,2.0\n1,0.5,0.1\n")
    assert import_trajectory(path, mode="ls").c is None
    with pytest.raises(DataFormatError, match="c_0"):
        import_trajectory(path, mode="iv")


def test_stable_plant_negative_lags_near_zero():
    """A causal stable plant has no anticausal part, so RLS puts almost nothing on future inputs."""
    model = StateSpaceModel([[0.6, 0.1], [0.0, -0.3]], [[1.0], [0.5]], [[1.0, 1.0]])
    traj = simulate_closed_loop(model, ZeroController(1), NoiseSpec(1.0, 0.0, 0.05, 7), 3000)
    r, d = 12, 4
    hist = run_recursive(traj, RegressorConfig(r, d), "ls", eta=1e-4)
    future = hist.theta[0, :d]
    assert np.max(np.abs(future)) < 0.01
    assert hist.theta[0, d + 1] == pytest.approx(1.5, abs=0.02)  # H_1 = C B
