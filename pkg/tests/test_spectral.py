import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avgspde.errors import ParameterError
from avgspde.spectral import (
    apply_diagonal,
    build_grid,
    evaluate,
    from_physical,
    padded_grid,
    resolvent_power,
    semigroup,
    sobolev_norm,
    to_physical,
    unit_mode,
)


class TestGrid:
    def test_eigenvalues_and_nodes(self):
        g = build_grid(1.0, 4)
        np.testing.assert_allclose(g.eigenvalues, (np.arange(1, 5) * np.pi / 2) ** 2)
        np.testing.assert_allclose(g.nodes, [-0.6, -0.2, 0.2, 0.6])
        assert g.lambda1 == pytest.approx(np.pi**2 / 4)

    def test_lambda1_below_one_for_long_domain(self):
        assert build_grid(1.8, 16).lambda1 == pytest.approx(0.761544, abs=1e-6)

    def test_cached_and_read_only(self):
        g = build_grid(1.0, 8)
        assert build_grid(1.0, 8) is g
        with pytest.raises(ValueError):
            g.eigenvalues[0] = 0.0

    @pytest.mark.parametrize("L,N", [(0.0, 4), (-1.0, 4), (float("nan"), 4), (1.0, 0), (1.0, 2.5)])
    def test_rejects_bad_input(self, L, N):
        with pytest.raises(ParameterError):
            build_grid(L, N)

    def test_padded_grid(self):
        g = build_grid(1.5, 16)
        pg = padded_grid(g)
        assert pg.n_modes == 33 and pg.half_length == 1.5


class TestTransforms:
    def test_basis_orthonormal_on_nodes(self):
        g = build_grid(1.3, 12)
        gram = g.spacing * g.basis_table.T @ g.basis_table
        np.testing.assert_allclose(gram, np.eye(12), atol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(0.2, 5.0),
        st.integers(1, 40),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip(self, L, N, seed):
        g = build_grid(L, N)
        c = np.random.default_rng(seed).standard_normal(N)
        assert np.max(np.abs(from_physical(to_physical(c, g), g) - c)) <= 1e-12

    def test_batched_transform(self):
        g = build_grid(1.0, 8)
        c = np.random.default_rng(0).standard_normal((3, 5, 8))
        np.testing.assert_allclose(from_physical(to_physical(c, g), g), c, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            to_physical(np.zeros(5), build_grid(1.0, 4))

    def test_evaluate_matches_nodes(self):
        g = build_grid(1.0, 9)
        c = np.random.default_rng(1).standard_normal(9)
        np.testing.assert_allclose(evaluate(c, g, g.nodes), to_physical(c, g), atol=1e-12)

    def test_mid_value_of_first_mode(self):
        g = build_grid(1.0, 4)
        assert evaluate(unit_mode(g, 1), g, 0.0) == pytest.approx(1.0)
        assert evaluate(unit_mode(g, 2), g, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_unit_mode_range(self):
        with pytest.raises(ParameterError):
            unit_mode(build_grid(1.0, 4), 5)


class TestMultipliers:
    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.3, 3.0))
    def test_semigroup_composition(self, s, t, L):
        g = build_grid(L, 16)
        c = np.linspace(1.0, -1.0, 16)
        two = apply_diagonal(apply_diagonal(c, g, semigroup(s)), g, semigroup(t))
        one = apply_diagonal(c, g, semigroup(s + t))
        assert np.max(np.abs(two - one)) <= 1e-12

    def test_resolvent_power(self):
        g = build_grid(1.0, 3)
        out = apply_diagonal(np.ones(3), g, resolvent_power(1))
        np.testing.assert_allclose(out, 1 / (1 + g.eigenvalues))

    def test_explicit_list_shape(self):
        g = build_grid(1.0, 3)
        with pytest.raises(ParameterError):
            apply_diagonal(np.ones(3), g, [1.0, 2.0])

    def test_negative_time(self):
        with pytest.raises(ParameterError):
            semigroup(-1.0)

    def test_sobolev_norm(self):
        g = build_grid(1.0, 4)
        c = unit_mode(g, 2, 3.0)
        assert sobolev_norm(c, g) == pytest.approx(3.0)
        assert sobolev_norm(c, g, 2.0) == pytest.approx(3.0 * g.eigenvalues[1])
