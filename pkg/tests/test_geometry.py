import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rguide import geometry as geo
from rguide.errors import DegenerateDirection, DimensionMismatch, GeometryError, NonFiniteInput

from conftest import dense_composite, dense_penalty, dense_rank_one, random_unit, rel_err

E1, E2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])


def rank_one(rng, d, lt=None, ln=None):
    lt = rng.uniform(0.2, 3.0) if lt is None else lt
    ln = rng.uniform(0.2, 30.0) if ln is None else ln
    n = random_unit(rng, d)
    return geo.RankOneAnisotropic(n, lt, ln), dense_rank_one(n, lt, ln)


class TestConstruction:
    def test_normal_must_be_unit_or_shorter(self):
        with pytest.raises(GeometryError):
            geo.RankOneAnisotropic(np.array([2.0, 0.0]), 1.0, 10.0)

    def test_penalty_direction_must_be_unit(self):
        with pytest.raises(GeometryError):
            geo.RadialPenalty(np.array([0.5, 0.0]), 1.0)

    def test_unit_tolerance(self):
        u = E1 * (1 + 5e-13)
        geo.ScoreAlignedPenalty(u, 1.0)
        with pytest.raises(GeometryError):
            geo.ScoreAlignedPenalty(E1 * (1 + 1e-11), 1.0)

    @pytest.mark.parametrize("lt,ln", [(0.0, 1.0), (1.0, -1.0), (math.inf, 1.0), (1.0, math.nan)])
    def test_bad_eigenvalues(self, lt, ln):
        with pytest.raises(GeometryError):
            geo.RankOneAnisotropic(E1, lt, ln)

    def test_infinite_lambda_only_for_score_aligned(self):
        geo.ScoreAlignedPenalty(E1, math.inf)
        with pytest.raises(GeometryError):
            geo.RadialPenalty(E1, math.inf)
        with pytest.raises(GeometryError):
            geo.RadialPenalty(E1, -0.1)

    def test_diagonal_positive(self):
        with pytest.raises(GeometryError):
            geo.Diagonal(np.array([1.0, 0.0]))

    def test_stored_direction_is_read_only(self):
        m = geo.RankOneAnisotropic(E1.copy(), 1.0, 10.0)
        with pytest.raises(ValueError):
            m.normal[0] = 2.0

    def test_composite_rejects_projection_core(self):
        with pytest.raises(GeometryError):
            geo.Composite(geo.Diagonal(np.ones(3)), geo.ScoreAlignedPenalty(E1, math.inf))

    def test_composite_dimension_check(self):
        with pytest.raises(DimensionMismatch):
            geo.Composite(geo.Diagonal(np.ones(2)), geo.RankOneAnisotropic(E1, 1.0, 2.0))


class TestApply:
    def test_identity(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_array_equal(geo.metric_apply(geo.Identity(), v), v)

    def test_normal_is_eigenvector(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        np.testing.assert_allclose(geo.metric_apply(m, E1), 10.0 * E1)

    def test_tangent_is_eigenvector(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        np.testing.assert_allclose(geo.metric_apply(m, E2), E2)

    def test_dense_oracle_d8(self, rng):
        m, dense = rank_one(rng, 8)
        v = rng.standard_normal(8)
        np.testing.assert_allclose(geo.metric_apply(m, v), dense @ v, rtol=1e-12, atol=1e-12)

    def test_eigenstructure_random(self, rng):
        for d in (2, 8, 64):
            m, _ = rank_one(rng, d)
            n = m.normal
            v = rng.standard_normal(d)
            v -= (v @ n) * n
            np.testing.assert_allclose(m.apply(n), m.lambda_normal * n, rtol=1e-12)
            np.testing.assert_allclose(m.apply(v), m.lambda_tangent * v, rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        with pytest.raises(DimensionMismatch):
            m.apply(np.ones(4))

    def test_non_finite(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        with pytest.raises(NonFiniteInput):
            m.apply(np.array([1.0, np.nan, 0.0]))
        with pytest.raises(NonFiniteInput):
            m.quadratic_form(np.array([np.inf, 0.0, 0.0]))

    def test_batched_rows_match_single(self, rng):
        m, _ = rank_one(rng, 6)
        V = rng.standard_normal((4, 6))
        out = m.apply(V)
        for i in range(4):
            np.testing.assert_allclose(out[i], m.apply(V[i]), rtol=1e-14)

    def test_batched_normals(self, rng):
        N = np.stack([random_unit(rng, 5) for _ in range(3)])
        m = geo.RankOneAnisotropic(N, 1.0, 7.0)
        V = rng.standard_normal((3, 5))
        for i in range(3):
            np.testing.assert_allclose(m.inverse_apply(V)[i], np.linalg.solve(dense_rank_one(N[i], 1, 7), V[i]),
                                       rtol=1e-12)


class TestInverse:
    def test_normal_eigenvalue(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        np.testing.assert_allclose(geo.metric_inverse_apply(m, E1), 0.1 * E1, rtol=1e-15)

    def test_projection_kills_score_component(self):
        m = geo.ScoreAlignedPenalty(E1, math.inf)
        np.testing.assert_array_equal(geo.metric_inverse_apply(m, E1 + E2), E2)

    def test_dense_inverse_d16(self, rng):
        m, dense = rank_one(rng, 16)
        v = rng.standard_normal(16)
        assert rel_err(m.inverse_apply(v), np.linalg.solve(dense, v)) < 1e-10

    @pytest.mark.parametrize("d", [2, 8, 64])
    def test_sherman_morrison_consistency(self, rng, d):
        for _ in range(20):
            m, dense = rank_one(rng, d)
            v = rng.standard_normal(d)
            assert rel_err(m.inverse_apply(v), np.linalg.solve(dense, v)) < 1e-10
            assert rel_err(m.inverse_apply(m.apply(v)), v) < 1e-10

    def test_short_normal_uses_exact_inverse(self, rng):
        n = 0.3 * random_unit(rng, 5)
        m = geo.RankOneAnisotropic(n, 2.0, 20.0)
        v = rng.standard_normal(5)
        assert rel_err(m.inverse_apply(v), np.linalg.solve(dense_rank_one(n, 2.0, 20.0), v)) < 1e-12

    def test_unit_normal_reduces_to_textbook_formula(self, rng):
        n = random_unit(rng, 7)
        lt, ln = 1.5, 12.0
        v = rng.standard_normal(7)
        textbook = v / lt - (ln - lt) / (lt * ln) * (n @ v) * n
        np.testing.assert_allclose(geo.RankOneAnisotropic(n, lt, ln).inverse_apply(v), textbook, rtol=1e-13)

    @pytest.mark.parametrize("cls", [geo.RadialPenalty, geo.ScoreAlignedPenalty])
    def test_penalty_dense(self, rng, cls):
        u = random_unit(rng, 9)
        lam = 3.7
        m = cls(u, lam)
        v = rng.standard_normal(9)
        dense = dense_penalty(u, lam)
        np.testing.assert_allclose(m.apply(v), dense @ v, rtol=1e-12)
        assert rel_err(m.inverse_apply(v), np.linalg.solve(dense, v)) < 1e-12

    def test_diagonal(self, rng):
        w = rng.uniform(0.1, 5.0, 6)
        v = rng.standard_normal(6)
        m = geo.Diagonal(w)
        np.testing.assert_allclose(m.inverse_apply(m.apply(v)), v, rtol=1e-14)
        np.testing.assert_allclose(m.quadratic_form(v), v @ (w * v), rtol=1e-14)

    def test_composite_dense(self, rng):
        d = 10
        w = rng.uniform(0.2, 4.0, d)
        n = 0.9 * random_unit(rng, d)
        m = geo.Composite(geo.Diagonal(w), geo.RankOneAnisotropic(n, 1.3, 13.0))
        dense = dense_composite(w, n, 1.3, 13.0)
        v = rng.standard_normal(d)
        np.testing.assert_allclose(m.apply(v), dense @ v, rtol=1e-12)
        assert rel_err(m.inverse_apply(v), np.linalg.solve(dense, v)) < 1e-10
        np.testing.assert_allclose(m.quadratic_form(v), v @ dense @ v, rtol=1e-12)


class TestQuadraticForm:
    @pytest.mark.parametrize("m", [
        geo.Identity(), geo.RankOneAnisotropic(E1, 1.0, 10.0), geo.RadialPenalty(E2, 2.0),
        geo.ScoreAlignedPenalty(E1, math.inf), geo.Diagonal(np.array([1.0, 2.0, 3.0])),
    ])
    def test_zero_vector(self, m):
        assert m.quadratic_form(np.zeros(3)) == 0.0

    def test_eigenvalue_case(self):
        assert geo.metric_quadratic_form(geo.RankOneAnisotropic(E1, 1.0, 10.0), E1) == pytest.approx(10.0)

    def test_dense(self, rng):
        m, dense = rank_one(rng, 12)
        v = rng.standard_normal(12)
        np.testing.assert_allclose(m.quadratic_form(v), v @ dense @ v, rtol=1e-12)

    def test_projection_form(self):
        m = geo.ScoreAlignedPenalty(E1, math.inf)
        assert m.quadratic_form(E2) == pytest.approx(1.0)
        assert m.quadratic_form(E1 + E2) == math.inf
        with pytest.raises(GeometryError):
            m.apply(E2)

    @settings(max_examples=60, deadline=None)
    @given(
        v=arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
        lt=st.floats(1e-3, 1e3),
        ln=st.floats(1e-3, 1e3),
    )
    def test_positive_definite(self, v, lt, ln):
        n = np.ones(5) / np.sqrt(5.0)
        q = geo.RankOneAnisotropic(n, lt, ln).quadratic_form(v)
        if np.max(np.abs(v)) > 1e-100:  # below this the squares underflow
            assert q > 0
        elif not np.any(v):
            assert q == 0


class TestQuadraticGuidance:
    def test_identity_recovers_negative_gradient(self, rng):
        g = rng.standard_normal(4)
        np.testing.assert_array_equal(geo.solve_quadratic_guidance(geo.Identity(), g, 1.0), -g)

    def test_zero_beta(self, rng):
        m, _ = rank_one(rng, 4)
        np.testing.assert_array_equal(geo.solve_quadratic_guidance(m, rng.standard_normal(4), 0.0), np.zeros(4))

    def test_negative_beta_rejected(self):
        with pytest.raises(GeometryError):
            geo.solve_quadratic_guidance(geo.Identity(), E1, -1.0)

    def test_random_perturbation_optimality(self, rng):
        m, dense = rank_one(rng, 8)
        g = rng.standard_normal(8)
        beta = 1.7
        u = geo.solve_quadratic_guidance(m, g, beta)

        def objective(w):
            return 0.5 * np.einsum("...i,ij,...j->...", w, dense, w) + beta * (w @ g)

        deltas = rng.standard_normal((10_000, 8)) * rng.uniform(1e-4, 1.0, (10_000, 1))
        assert np.all(objective(u + deltas) >= objective(u))
        # Stationarity against the dense gradient.
        np.testing.assert_allclose(dense @ u + beta * g, 0.0, atol=1e-12)


class TestSteepestDescent:
    def test_euclidean(self):
        np.testing.assert_allclose(geo.steepest_descent_direction(geo.Identity(), E1, 1.0), -E1)

    def test_anisotropic_closed_form(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        v = geo.steepest_descent_direction(m, E1, 1.0)
        np.testing.assert_allclose(v, -E1 / np.sqrt(10.0), rtol=1e-14)
        assert E1 @ v == pytest.approx(-1.0 / np.sqrt(10.0), rel=1e-14)
        assert v @ dense_rank_one(E1, 1.0, 10.0) @ v == pytest.approx(1.0, rel=1e-12)

    def test_norm_and_value(self, rng):
        m, dense = rank_one(rng, 6)
        g = rng.standard_normal(6)
        delta = 0.37
        v = geo.steepest_descent_direction(m, g, delta)
        assert np.sqrt(v @ dense @ v) == pytest.approx(delta, rel=1e-10)
        assert g @ v == pytest.approx(-delta * np.sqrt(g @ np.linalg.solve(dense, g)), rel=1e-10)

    def test_brute_force_sphere(self, rng):
        m, dense = rank_one(rng, 6)
        g = rng.standard_normal(6)
        delta = 1.3
        v = geo.steepest_descent_direction(m, g, delta)
        L = np.linalg.cholesky(dense)
        z = rng.standard_normal((100_000, 6))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        w = delta * np.linalg.solve(L.T, z.T).T  # ||w||_M = delta
        assert g @ v <= np.min(w @ g) + 1e-9

    def test_zero_gradient(self):
        with pytest.raises(DegenerateDirection):
            geo.steepest_descent_direction(geo.Identity(), np.zeros(3), 1.0)

    def test_nonpositive_step(self):
        with pytest.raises(GeometryError):
            geo.steepest_descent_direction(geo.Identity(), E1, 0.0)


class TestEfficiency:
    def test_mog_direction_attains_dual_norm(self, rng):
        m, dense = rank_one(rng, 5)
        g = rng.standard_normal(5)
        u = -m.inverse_apply(g)
        expected = np.sqrt(g @ np.linalg.solve(dense, g))
        assert geo.guidance_efficiency(m, g, u) == pytest.approx(expected, rel=1e-12)
        assert geo.dual_norm(m, g) == pytest.approx(expected, rel=1e-12)

    def test_sign_flip(self, rng):
        m, _ = rank_one(rng, 5)
        g = rng.standard_normal(5)
        assert geo.guidance_efficiency(m, g, m.inverse_apply(g)) == pytest.approx(-geo.dual_norm(m, g), rel=1e-12)

    def test_mog_beats_euclidean_off_eigenvector(self, rng):
        m, _ = rank_one(rng, 5, lt=1.0, ln=10.0)
        g = rng.standard_normal(5)
        assert geo.guidance_efficiency(m, g, -m.inverse_apply(g)) > geo.guidance_efficiency(m, g, -g)

    def test_equal_on_eigenvector(self):
        m = geo.RankOneAnisotropic(E1, 1.0, 10.0)
        for g in (E1, E2):
            assert geo.guidance_efficiency(m, g, -m.inverse_apply(g)) == pytest.approx(
                geo.guidance_efficiency(m, g, -g), rel=1e-12)

    def test_zero_update(self):
        with pytest.raises(DegenerateDirection):
            geo.guidance_efficiency(geo.Identity(), E1, np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_cauchy_schwarz(self, seed):
        r = np.random.default_rng(seed)
        m, dense = rank_one(r, 4)
        g, v = r.standard_normal(4), r.standard_normal(4)
        lhs = abs(g @ v)
        rhs = np.sqrt(g @ np.linalg.solve(dense, g)) * np.sqrt(v @ dense @ v)
        assert lhs <= rhs + 1e-9


class TestPenaltyLimit:
    def test_monotone_convergence_to_projection(self, rng):
        u = random_unit(rng, 6)
        v = rng.standard_normal(6)
        exact = geo.ScoreAlignedPenalty(u, math.inf).inverse_apply(v)
        comps = []
        for lam in (1e2, 1e4, 1e6):
            out = geo.ScoreAlignedPenalty(u, lam).inverse_apply(v)
            comps.append(abs(out @ u))
        assert comps[0] > comps[1] > comps[2]
        assert rel_err(geo.ScoreAlignedPenalty(u, 1e6).inverse_apply(v), exact) < 1e-4


class TestUnitNormal:
    def test_definition(self, rng):
        s0 = rng.standard_normal(4) * 3
        un = geo.UnitNormal.from_score(s0)
        np.testing.assert_allclose(un.vector, s0 / (np.linalg.norm(s0) + 1e-5), rtol=1e-15)
        assert un.source_norm == pytest.approx(np.linalg.norm(s0))
        assert np.linalg.norm(un.vector) < 1.0

    def test_large_score_is_nearly_unit(self):
        un = geo.UnitNormal.from_score(1e3 * E1)
        assert abs(np.linalg.norm(un.vector) - 1.0) <= 1e-5 / 1e3 * 1.01

    def test_zero_score(self):
        np.testing.assert_array_equal(geo.UnitNormal.from_score(np.zeros(3)).vector, np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)))
    def test_norm_at_most_one(self, s0):
        assert np.linalg.norm(geo.UnitNormal.from_score(s0).vector) <= 1.0


class TestNormalize:
    def test_rows(self, rng):
        V = rng.standard_normal((3, 4))
        np.testing.assert_allclose(np.linalg.norm(geo.normalize(V), axis=1), 1.0)

    def test_zero(self):
        with pytest.raises(DegenerateDirection):
            geo.normalize(np.zeros(2))
