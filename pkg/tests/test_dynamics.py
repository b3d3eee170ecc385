import numpy as np
import pytest

from avgspde import BlowUpError, ParameterError, eval_drift, fhn_problem, hypothesis_audit
from avgspde.dynamics import (
    FHN_FAST,
    FHN_SLOW,
    HypothesisConstants,
    drift_with_mask,
    polynomial_drift,
)
from avgspde.spectral import build_grid, evaluate, unit_mode


def projected(func, grid, n_quad=4000):
    """Galerkin coefficients of func(x) by dense midpoint quadrature."""
    L = grid.half_length
    x = -L + (np.arange(n_quad) + 0.5) * 2 * L / n_quad
    k = np.arange(1, grid.n_modes + 1)
    phi = np.sqrt(1 / L) * np.sin(np.outer(x + L, k) * np.pi / (2 * L))
    return (func(x) @ phi) * 2 * L / n_quad


class TestDrift:
    def test_fhn_mode_one_oracle(self):
        g = build_grid(1.0, 16)
        d = eval_drift(FHN_SLOW, unit_mode(g, 1, 0.5), np.zeros(16), g)
        assert d[0] == pytest.approx(0.40625, abs=1e-12)
        # phi_3 = -cos(3 pi x / 2) on (-1, 1)
        assert d[2] == pytest.approx(0.03125, abs=1e-12)
        assert np.max(np.abs(np.delete(d, [0, 2]))) < 1e-12

    def test_cubic_is_alias_free(self):
        g = build_grid(1.3, 12)
        c = np.random.default_rng(4).standard_normal(12) / np.arange(1, 13)
        v = np.random.default_rng(5).standard_normal(12) / np.arange(1, 13) ** 2
        got = eval_drift(FHN_SLOW, c, v, g)
        want = projected(lambda x: (lambda u, y: u - u**3 + y)(evaluate(c, g, x), evaluate(v, g, x)), g)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_blowup_raises(self):
        g = build_grid(1.0, 4)
        with pytest.raises(BlowUpError):
            eval_drift(FHN_SLOW, unit_mode(g, 1, 1e4), np.zeros(4), g)

    def test_mask_flags_only_bad_rows(self):
        g = build_grid(1.0, 4)
        u = np.stack([unit_mode(g, 1, 0.1), unit_mode(g, 1, 1e4)])
        out, bad = drift_with_mask(FHN_SLOW, u, np.zeros_like(u), g)
        assert bad.tolist() == [False, True]
        assert np.all(out[1] == 0) and np.all(np.isfinite(out[0]))

    def test_polynomial_table(self):
        d = polynomial_drift("quad", {(2, 1): 2.0, (1, 0): -1.0})
        assert d(2.0, 3.0) == pytest.approx(22.0)
        assert d.d_dx(2.0, 3.0) == pytest.approx(23.0)
        assert d.depends_on_y
        assert not polynomial_drift("loc", {(1, 0): 1.0, (3, 0): -1.0}).depends_on_y
        assert FHN_FAST.is_unit_linear_fast and not FHN_SLOW.is_unit_linear_fast
        with pytest.raises(ParameterError):
            polynomial_drift("bad", {(-1, 0): 1.0})


class TestProblem:
    def test_defaults(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1, u0_amplitude=0.2)
        assert p.u0[0] == pytest.approx(0.2)
        assert p.with_(epsilon=0.05).epsilon == 0.05

    @pytest.mark.parametrize("eps", [0.0, -0.1, float("nan")])
    def test_bad_epsilon(self, eps):
        with pytest.raises(ParameterError):
            fhn_problem(L=1.0, N=8, epsilon=eps)

    def test_bad_constants(self):
        with pytest.raises(ParameterError):
            HypothesisConstants(C_f=-1.0)


class TestAudit:
    def statuses(self, p):
        return {e.hypothesis: e.status for e in hypothesis_audit(p).entries}

    def test_default_fhn(self):
        s = self.statuses(fhn_problem(L=1.0, N=16, epsilon=0.1, q1=("resolvent_power", 2), q2=("resolvent_power", 2)))
        assert s == {"H1": "pass", "H2": "pass", "H3": "pass", "H4": "pass"}

    def test_long_domain_violates_h3(self):
        rep = hypothesis_audit(fhn_problem(L=1.8, N=16, epsilon=0.1))
        assert any(w.startswith("H3:") for w in rep.warnings)
        assert not rep.ok

    @pytest.mark.parametrize("q,ok", [(("resolvent_power", 1), False), (("resolvent_power", 2), True), (("cylindrical", 0), False)])
    def test_h4(self, q, ok):
        s = self.statuses(fhn_problem(L=1.0, N=16, epsilon=0.1, q1=q, q2=q))
        assert (s["H4"] == "pass") is ok

    def test_declared_c_too_small(self):
        p = fhn_problem(L=1.0, N=8, epsilon=0.1).with_(constants=HypothesisConstants(c=0.0))
        assert self.statuses(p)["H1"] == "warn"

    def test_lipschitz_violation(self):
        g = polynomial_drift("steep", {(1, 0): 1.0, (0, 1): -3.0})
        p = fhn_problem(L=1.0, N=8, epsilon=0.1).with_(g=g)
        assert self.statuses(p)["H2"] == "warn"
