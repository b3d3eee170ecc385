import math

import numpy as np
import pytest

from avgspde import BlowUpError, ParameterError, fhn_problem
from avgspde.dynamics import FHN_FAST, FHN_SLOW, polynomial_drift
from avgspde.integrators import (
    FastExactStepper,
    FastGeneralStepper,
    SlowStepper,
    empirical_deviation,
    estimate_fbar,
    fbar_closed_fhn,
    fhn_averaged_model,
    integrate_averaged,
    integrate_deviation,
    integrate_slow_fast,
    lyapunov_variance,
    n_substeps,
    sample_stationary_linear,
    sqrtB_closed_fhn,
)
from avgspde.noise import derive_stream, make_covariance
from avgspde.spectral import build_grid, unit_mode


@pytest.fixture
def grid():
    return build_grid(1.0, 16)


class TestSteppers:
    def test_slow_stepper_deterministic_is_exact_for_linear(self, grid):
        # du = A u dt: exponential Euler with zero drift is the semigroup
        st = SlowStepper(grid, 0.1, 0.0, np.zeros(16))
        u = np.ones(16)
        np.testing.assert_allclose(st(u, np.zeros(16), None), np.exp(-0.1 * grid.eigenvalues))

    def test_slow_stepper_constant_drift(self, grid):
        st = SlowStepper(grid, 0.5, 0.0, np.zeros(16))
        out = st(np.zeros(16), np.ones(16), None)
        np.testing.assert_allclose(out, -np.expm1(-0.5 * grid.eigenvalues) / grid.eigenvalues)

    def test_exact_fast_stationarity(self, grid):
        cov = make_covariance("resolvent_power", grid, p=1)
        eps, dt, sigma2 = 0.1, 0.05, 3.0
        u = unit_mode(grid, 1, 0.5)
        step = FastExactStepper(grid, dt, eps, sigma2, cov)
        rng = np.random.default_rng(0)
        R = 100_000
        one_plus = 1 + grid.eigenvalues
        mean = u / one_plus
        std = sigma2 * np.sqrt(cov.mode_variances / (2 * one_plus))
        v = mean + std * rng.standard_normal((R, 16))
        for _ in range(5):
            v = step(v, u, rng.standard_normal((R, 16)))
        np.testing.assert_allclose(v.var(axis=0), std**2, rtol=0.02)
        assert np.all(np.abs(v.mean(axis=0) - mean) <= 0.02 * std)

    def test_general_matches_exact_without_noise(self, grid):
        cov = make_covariance("resolvent_power", grid, p=1)
        u = unit_mode(grid, 1, 0.5)
        v0 = unit_mode(grid, 2, 1.0)
        ex = FastExactStepper(grid, 0.01, 0.1, 3.0, cov)
        errs = []
        for theta in (0.1, 0.05, 0.025):
            gen = FastGeneralStepper(grid, 0.01, 0.1, 3.0, cov, FHN_FAST, theta)
            errs.append(np.max(np.abs(gen(v0, u) - ex(v0, u))))
        assert errs[1] < 0.6 * errs[0] and errs[2] < 0.6 * errs[1]

    def test_substeps(self):
        assert n_substeps(0.01, 0.1) == 1
        assert n_substeps(0.01, 0.001) == 100

    def test_stationary_sample_rejects_nonlinear_fast(self, grid):
        cov = make_covariance("resolvent_power", grid, p=1)
        g = polynomial_drift("cubic", {(1, 0): 1.0, (0, 3): -1.0})
        with pytest.raises(ValueError):
            sample_stationary_linear(np.zeros(16), 3.0, cov, grid, derive_stream(0, "fast-noise", 0), g=g)


class TestSlowFast:
    def test_reproducible_and_replica_independent(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1, sigma1=0.5, u0_amplitude=0.2)
        a = integrate_slow_fast(p, 0.2, 1e-3, 10, seed=9, replicas=[0, 1, 2])
        b = integrate_slow_fast(p, 0.2, 1e-3, 10, seed=9, replicas=[2])
        # same noise; batched matrix products may round differently
        np.testing.assert_allclose(a.u[:, 2], b.u[:, 0], rtol=0, atol=1e-14)
        single = integrate_slow_fast(p, 0.2, 1e-3, 10, seed=9)
        np.testing.assert_allclose(single.u, a.u[:, 0], rtol=0, atol=1e-14)
        again = integrate_slow_fast(p, 0.2, 1e-3, 10, seed=9, replicas=[0, 1, 2])
        np.testing.assert_array_equal(a.u, again.u)

    def test_recording(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1)
        tr = integrate_slow_fast(p, 0.1, 1e-3, 25)
        np.testing.assert_allclose(tr.times, [0, 0.025, 0.05, 0.075, 0.1])
        assert tr.u.shape == (5, 8) and tr.v.shape == (5, 8) and tr.steps == 100

    def test_t_not_multiple_of_dt(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1)
        with pytest.raises(ParameterError):
            integrate_slow_fast(p, 0.1, 0.03)

    def test_blowup_single_and_ensemble(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1, sigma1=2.0, sigma2=0.1)
        p = p.with_(f=polynomial_drift("explode", {(3, 0): 1.0}))
        with pytest.raises(BlowUpError):
            integrate_slow_fast(p.with_(u0=unit_mode(p.grid, 1, 5.0)), 2.0, 1e-3)
        tr = integrate_slow_fast(p.with_(u0=unit_mode(p.grid, 1, 1.5)), 2.0, 1e-3, 100, seed=1, replicas=8)
        assert 0 < tr.ok.sum() < 8
        dead = ~tr.ok
        assert np.all((tr.blowup_times[dead] > 0) & (tr.blowup_times[dead] < 2.0))
        assert np.all(tr.u[-1, dead] == 0) and np.all(np.isfinite(tr.u[-1, tr.ok]))

    def test_weak_order_under_dt_halving(self):
        p = fhn_problem(L=1.0, N=8, epsilon=1.0, sigma2=0.5, u0_amplitude=1.0)

        def mean_mid(dt, R=16384):
            tr = integrate_slow_fast(p, 1.0, dt, int(round(1 / dt)), seed=3, replicas=R)
            return tr.mid()[-1].mean()

        ref = mean_mid(0.1 / 64)
        dts = np.array([0.1, 0.05, 0.025])
        errs = np.array([abs(mean_mid(d) - ref) for d in dts])
        order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert order >= 0.8


class TestAveraged:
    def test_fbar_closed_form(self, grid):
        fb = fbar_closed_fhn(unit_mode(grid, 1, 0.5), grid)
        assert fb[0] == pytest.approx(0.40625 + 0.5 / (1 + grid.lambda1), abs=1e-12)
        assert fb[0] == pytest.approx(0.55045, abs=1e-5)

    def test_fbar_estimate_agrees(self, grid):
        cov = make_covariance("resolvent_power", grid, p=1)
        u = unit_mode(grid, 1, 0.5)
        est = estimate_fbar(FHN_SLOW, FHN_FAST, u, 3.0, cov, grid, 2.0, 400.0, 0.05, seed=1)
        z = np.abs(est.mean - fbar_closed_fhn(u, grid)) / est.stderr
        assert np.all(z[:4] < 4)

    def test_deviation_variance_with_zero_noise(self, grid):
        cov = make_covariance("resolvent_power", grid, p=1)
        m = fhn_averaged_model(grid, cov)
        z = integrate_deviation(m.__class__(**{**m.__dict__, "sqrtB": np.zeros(16)}), np.zeros(16), 1.0, 0.01)
        assert np.all(z.u == 0)

    def test_averaged_decays_below_threshold(self, grid):
        m = fhn_averaged_model(grid, make_covariance("resolvent_power", grid, p=1))
        tr = integrate_averaged(m, unit_mode(grid, 1, 0.3), 20.0, 0.01, 2000)
        assert abs(tr.mid()[-1]) < 1e-3

    def test_lyapunov(self, grid):
        s = sqrtB_closed_fhn(make_covariance("resolvent_power", grid, p=1), grid)
        assert s[0] ** 2 == pytest.approx(0.215889, abs=1e-6)
        assert lyapunov_variance(s[0], grid.lambda1 - 1) == pytest.approx(0.07356, abs=1e-5)
        with pytest.raises(ParameterError):
            lyapunov_variance(1.0, 0.0)

    def test_empirical_deviation_grid_check(self, grid):
        m = fhn_averaged_model(grid, make_covariance("resolvent_power", grid, p=1))
        a = integrate_averaged(m, np.zeros(16), 1.0, 0.01, 10)
        b = integrate_averaged(m, np.zeros(16), 1.0, 0.01, 20)
        with pytest.raises(ParameterError):
            empirical_deviation(a, b, 0.1)
        z = empirical_deviation(a, a, 0.25)
        assert np.all(z.u == 0) and math.isclose(z.times[-1], 1.0)
