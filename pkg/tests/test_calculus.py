from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpepc.calculus import (
    DampingTooSmall,
    ParamLayout,
    c_value,
    f_value,
    grad_c,
    grad_f,
    hess_c,
    hess_f,
    hessian,
    lagrangian_hessian,
    perm_matrix_RR,
    solve_kkt_system,
)
from cpepc.tensor import KruskalModel, reconstruct
from oracles import (
    central_difference_gradient,
    exact_jacobian,
    f_of_theta,
    hessian_by_differences,
)


def random_model(rng, shape, R):
    return KruskalModel(rng.uniform(0.5, 1.5, R), [rng.standard_normal((I, R)) for I in shape])


small_shapes = st.tuples(st.integers(2, 3), st.integers(1, 4), st.integers(1, 3)).flatmap(
    lambda t: st.tuples(st.lists(st.integers(1, 4), min_size=t[0], max_size=t[0]).map(tuple), st.just(t[2]))
)


class TestLayout:
    def test_pack_unpack_roundtrip(self, rng):
        m = random_model(rng, (2, 3, 4), 2)
        lay = ParamLayout.of(m)
        theta = lay.pack(m)
        assert theta.size == lay.size == 2 * 9
        np.testing.assert_allclose(reconstruct(lay.unpack(theta)).data, reconstruct(m).data, atol=1e-12)

    def test_column_major_offsets(self, rng):
        m = random_model(rng, (2, 3), 2)
        theta = ParamLayout.of(m).pack(m)
        # entry (i=1, r=1) of mode 1 sits at offset 4 + 1 * 3 + 1
        assert theta[8] == m.factors[1][1, 1]

    def test_split_checks_length(self, rng):
        lay = ParamLayout((2, 2), 1)
        with pytest.raises(ValueError):
            lay.split(np.zeros(3))


class TestGradients:
    @given(small_shapes, st.integers(0, 2**32 - 1))
    def test_finite_differences(self, shape_rank, seed):
        shape, R = shape_rank
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        X = rng.standard_normal(shape)
        lay = ParamLayout.of(m)
        theta = lay.pack(m)
        gf = central_difference_gradient(lambda th: f_of_theta(lay.split, th), theta)
        gc = central_difference_gradient(lambda th: c_value(X, lay.unpack(th)), theta)
        assert np.linalg.norm(grad_f(m) - gf) <= 1e-5 * max(np.linalg.norm(gf), 1e-8)
        assert np.linalg.norm(grad_c(X, m) - gc) <= 1e-5 * max(np.linalg.norm(gc), 1e-8)

    def test_values(self, rng):
        m = random_model(rng, (2, 3, 2), 2)
        assert np.isclose(f_value(m), m.eta_sq_norm())
        assert c_value(reconstruct(m), m) < 1e-24


class TestHessians:
    @pytest.mark.parametrize("shape,R", [((2, 3), 2), ((3, 2, 4), 3), ((4, 4, 4), 2), ((1, 3, 2), 3)])
    def test_gauss_newton_is_2JtJ(self, rng, shape, R):
        m = random_model(rng, shape, R)
        lay = ParamLayout.of(m)
        J = exact_jacobian(lay.split(lay.pack(m)))
        np.testing.assert_allclose(hess_c(m).materialize(), 2 * J.T @ J, atol=1e-10)

    @pytest.mark.parametrize("shape,R", [((2, 3), 2), ((3, 2, 4), 3), ((2, 2, 2), 2)])
    def test_exact_f_hessian(self, rng, shape, R):
        m = random_model(rng, shape, R)
        lay = ParamLayout.of(m)
        Hfd = hessian_by_differences(lambda th: grad_f(lay.unpack(th)), lay.pack(m))
        H = hess_f(m).materialize()
        np.testing.assert_allclose(H, Hfd, atol=1e-6 * max(1.0, np.abs(H).max()))

    @given(small_shapes, st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
    def test_factored_forms_match(self, shape_rank, seed, a, b):
        shape, R = shape_rank
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        h = hessian(m, a, b, 0.3)
        H = h.materialize()
        Gblk, Z, K = h.gk_form()
        np.testing.assert_allclose(Gblk + Z @ K @ Z.T + 0.3 * np.eye(H.shape[0]), H, atol=1e-10)
        blocks, Zt, Psi = h.ztilde_form()
        from scipy.linalg import block_diag

        np.testing.assert_allclose(block_diag(*blocks) + Zt @ Psi @ Zt.T + 0.3 * np.eye(H.shape[0]), H,
                                   atol=1e-10 * max(1.0, np.abs(H).max()))
        v = rng.standard_normal(H.shape[0])
        np.testing.assert_allclose(h.matvec(v), H @ v, atol=1e-10 * max(1.0, np.abs(H).max()))

    def test_lagrangian_combination(self, rng):
        m = random_model(rng, (2, 3, 2), 2)
        H = lagrangian_hessian(m, 0.7, 0.1).materialize()
        expected = hess_f(m).materialize() + 0.7 * hess_c(m).materialize() + 0.1 * np.eye(H.shape[0])
        np.testing.assert_allclose(H, expected, atol=1e-12)

    def test_mean_diagonal(self, rng):
        m = random_model(rng, (3, 2, 4), 2)
        h = hessian(m, 1.0, 2.0)
        assert np.isclose(h.mean_diagonal(), np.mean(np.diag(h.materialize())))

    def test_materialize_limit(self, rng):
        m = random_model(rng, (12, 12, 12), 3)
        with pytest.raises(ValueError):
            hess_c(m).materialize()


class TestSolve:
    @given(small_shapes, st.integers(0, 2**32 - 1), st.sampled_from(["auto", "gk", "ztilde"]))
    def test_woodbury_residual(self, shape_rank, seed, method):
        shape, R = shape_rank
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        for a, b in [(0.0, 2.0), (2.0, 1.0), (2.0, 0.0)]:
            h = hessian(m, a, b, 1e-2 * max(hess_c(m).mean_diagonal(), 1.0))
            v = rng.standard_normal(h.layout.size)
            try:
                x = h.solve(v, method)
            except DampingTooSmall:
                # the undamped f-part can be indefinite; only then may the solve refuse
                assert a > 0
                continue
            assert np.linalg.norm(h.matvec(x) - v) <= 1e-8 * np.linalg.norm(v)

    def test_multiple_right_hand_sides(self, rng):
        m = random_model(rng, (4, 3, 5), 3)
        h = hessian(m, 0.0, 2.0, 0.5)
        V = rng.standard_normal((h.layout.size, 3))
        X = h.solve(V)
        for k in range(3):
            np.testing.assert_allclose(X[:, k], h.solve(V[:, k]), atol=1e-10)

    def test_zero_gram_entries_fall_back(self):
        U = np.array([[1.0, 0.0], [0.0, 1.0]])
        m = KruskalModel(np.ones(2), [U, U.copy(), U.copy()])
        h = hessian(m, 0.0, 2.0, 0.1)
        v = np.arange(12.0)
        x = h.solve(v)
        np.testing.assert_allclose(h.matvec(x), v, atol=1e-10)

    def test_bad_method(self, rng):
        with pytest.raises(ValueError):
            hess_c(random_model(rng, (2, 2), 1)).solve(np.zeros(4), "cg")

    def test_kkt_system(self, rng):
        m = random_model(rng, (3, 2, 3), 2)
        h = hessian(m, 0.0, 2.0, 1.0)
        n = h.layout.size
        assert np.all(np.linalg.eigvalsh(h.materialize()) > 0)
        g_obj, g_con = rng.standard_normal(n), rng.standard_normal(n)
        d, lam = solve_kkt_system(h, g_obj, g_con, 0.4)
        H = h.materialize()
        KKT = np.block([[H, g_con[:, None]], [g_con[None, :], np.zeros((1, 1))]])
        sol = np.linalg.solve(KKT, -np.concatenate([g_obj, [0.4]]))
        np.testing.assert_allclose(d, sol[:-1], atol=1e-9)
        assert np.isclose(lam, sol[-1])

    def test_kkt_refuses_negative_curvature(self):
        m = KruskalModel(np.ones(1), [np.ones((2, 1)), np.ones((2, 1))])
        h = hessian(m, 0.0, 2.0, 1.0)
        n = h.layout.size
        with pytest.raises(DampingTooSmall):
            solve_kkt_system(h.damped(-100.0), np.zeros(n), np.ones(n), 0.0)


class TestPermutation:
    @pytest.mark.parametrize("R", [1, 2, 3, 5])
    def test_transpose_identity_exact(self, R):
        P = perm_matrix_RR(R)
        X = np.arange(R * R, dtype=float).reshape(R, R) + 0.25
        assert np.array_equal(P @ np.ravel(X, order="F"), np.ravel(X.T, order="F"))
        assert np.array_equal(P @ P, np.eye(R * R))
        assert np.array_equal(P, P.T)
