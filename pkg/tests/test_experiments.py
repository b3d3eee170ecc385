import numpy as np
import pytest

from avgspde.config import parse_config
from avgspde.dynamics import polynomial_drift
from avgspde.errors import ParameterError
from avgspde.experiments import (
    BIFURCATION_THRESHOLD,
    problem_from_config,
    run_audit,
    run_averaged,
    run_bifurcation_sweep,
    run_convergence_study,
    run_deviation,
    run_gaussianity_check,
    run_mixing_check,
    run_simulation,
    run_speedup_benchmark,
    run_variance_scaling,
    worker_count,
)


def cfg(sub, **kw):
    return parse_config(overrides={k: str(v) for k, v in kw.items()}, subcommand=sub)


class TestSingleRuns:
    def test_simulation_trajectory(self):
        rep = run_simulation(cfg("simulate", T=0.5, N=8, record_modes=3))
        assert rep.header == ("t", "u_mid", "v_mid", "u_h_norm", "v_h_norm", "c_1", "c_2", "c_3")
        assert len(rep.rows) == 51
        assert rep.meta["config_hash"] and rep.meta["seed"] == 42

    def test_averaged_has_no_v(self):
        rep = run_averaged(cfg("average", T=1.0, N=8))
        assert np.isnan(rep.rows[-1][2])

    def test_deviation(self):
        rep = run_deviation(cfg("deviation", T=4.0, N=8))
        assert rep.rows[0][1] == 0.0 and "z_mid_variance" in rep.summary

    def test_audit_rows(self):
        rep = run_audit(cfg("audit", L=1.8))
        assert [r[0] for r in rep.rows] == ["H1", "H2", "H3", "H4"]
        assert any(w.startswith("H3") for w in rep.meta["audit_warnings"])


class TestStudies:
    def test_v_independent_drift_has_zero_error(self):
        c = cfg("convergence", T=0.2, dt=1e-3, replicas=4, epsilons="0.4,0.2,0.1,0.04", sigma1=0.5)
        p = problem_from_config(c).with_(f=polynomial_drift("allen_cahn", {(1, 0): 1.0, (3, 0): -1.0}))
        rep = run_convergence_study(c, problem=p)
        assert np.all(rep.sup_errors == 0)

    def test_convergence_report_fields(self):
        rep = run_convergence_study(cfg("convergence", T=0.2, dt=1e-3, replicas=8, epsilons="0.4,0.2,0.1,0.04"))
        assert rep.header == ("epsilon", "replica", "sup_error")
        assert len(rep.rows) == 32 and rep.sup_errors.shape == (4, 8)
        assert np.isfinite(rep.slope) and rep.slope_ci[0] <= rep.slope <= rep.slope_ci[1]

    def test_epsilon_grid_validation(self):
        with pytest.raises(ParameterError):
            run_convergence_study(cfg("convergence", epsilons="0.1"))

    def test_bifurcation_rows(self):
        rep = run_bifurcation_sweep(cfg("bifurcation", T=2.0, t_burn=1.0, L_grid="1.0,1.6", N=8))
        assert rep.header == ("L", "rms_direct", "amp_averaged")
        assert [r[0] for r in rep.rows] == [1.0, 1.6]
        assert rep.summary["threshold"] == pytest.approx(1.32088, abs=1e-5)
        assert BIFURCATION_THRESHOLD == pytest.approx(np.pi / 2**1.25)

    def test_variance_fit_keys(self):
        rep = run_variance_scaling(cfg("variance", T=8.0, t_burn=2.0, N=8, epsilons="0.2,0.1", replicas=2))
        assert {"beta_direct", "beta_surrogate", "c_relative_difference"} <= set(rep.summary)

    def test_mixing(self):
        rep = run_mixing_check(cfg("mixing"))
        assert rep.summary["max_abs_deviation_from_exact"] <= 1e-12
        assert rep.summary["all_satisfied"]

    def test_benchmark_step_counts(self):
        rep = run_speedup_benchmark(cfg("benchmark", epsilons="0.1,0.01", T=0.1, bench_repeats=1, N=8))
        steps = rep.summary["steps"]
        assert steps[1]["direct_steps"] == 10 * steps[0]["direct_steps"]
        assert steps[0]["surrogate_steps"] == steps[1]["surrogate_steps"]

    def test_gaussianity_needs_replicas(self):
        with pytest.raises(ParameterError):
            run_gaussianity_check(cfg("gaussianity", replicas=16))


class TestWorkers:
    def test_env_parsing(self, monkeypatch):
        monkeypatch.setenv("AVG_SPDE_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("AVG_SPDE_THREADS", "0")
        assert worker_count() >= 1
        monkeypatch.setenv("AVG_SPDE_THREADS", "x")
        with pytest.raises(ParameterError):
            worker_count()

    def test_results_do_not_depend_on_workers(self, monkeypatch):
        c = cfg("bifurcation", T=1.0, t_burn=0.5, L_grid="1.0,1.2,1.4,1.6", N=8)
        monkeypatch.setenv("AVG_SPDE_THREADS", "1")
        a = run_bifurcation_sweep(c).rows
        monkeypatch.setenv("AVG_SPDE_THREADS", "4")
        assert run_bifurcation_sweep(c).rows == a
