from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpepc.tensor import (
    DenseTensor,
    KruskalModel,
    ShapeError,
    balance,
    fold,
    gram_full,
    gram_skip,
    khatri_rao,
    khatri_rao_skip,
    mttkrp,
    normalize,
    reconstruct,
    relative_error,
    residual_norm,
    unfold,
)
from oracles import dense_tensor_from_model, unfold_by_index_map

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)


def random_model(rng, shape, R):
    return KruskalModel(rng.uniform(0.5, 2.0, R), [rng.standard_normal((I, R)) for I in shape])


class TestDenseTensor:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            DenseTensor(np.array([1.0, np.nan]))

    def test_rejects_empty_extent(self):
        with pytest.raises(ShapeError):
            DenseTensor(np.zeros((2, 0)))

    def test_read_only(self):
        t = DenseTensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_buffer_is_first_index_fastest(self):
        t = DenseTensor.from_buffer((2, 3), np.arange(6.0))
        assert t.data[1, 0] == 1.0
        assert t.data[0, 1] == 2.0
        np.testing.assert_array_equal(t.to_buffer(), np.arange(6.0))

    def test_buffer_size_mismatch(self):
        with pytest.raises(ShapeError):
            DenseTensor.from_buffer((2, 2), np.arange(5.0))


class TestUnfold:
    def test_matrix_cases(self, rng):
        M = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(unfold(M, 0), M)
        np.testing.assert_array_equal(unfold(M, 1), M.T)

    def test_index_map_2x2x2(self):
        X = np.arange(8.0).reshape((2, 2, 2), order="F")
        for n in range(3):
            np.testing.assert_array_equal(unfold(X, n), unfold_by_index_map(X, n))

    @given(shapes, st.data())
    def test_fold_inverts_unfold(self, shape, data):
        X = np.arange(float(np.prod(shape))).reshape(shape)
        n = data.draw(st.integers(0, len(shape) - 1))
        np.testing.assert_array_equal(fold(unfold(X, n), n, shape), X)
        np.testing.assert_array_equal(unfold(X, n), unfold_by_index_map(X, n))

    def test_bad_mode(self):
        with pytest.raises(IndexError):
            unfold(np.zeros((2, 2)), 2)


class TestKhatriRao:
    def test_two_factor_skip_returns_other(self, rng):
        A, B = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        np.testing.assert_array_equal(khatri_rao_skip([A, B], 1), A)

    def test_column_is_outer_product(self):
        a = np.array([[1.0], [2.0]])
        b = np.array([[3.0], [5.0]])
        T = khatri_rao_skip([a, b, np.ones((7, 1))], 2)
        expected = np.ravel(np.multiply.outer(a[:, 0], b[:, 0]), order="F")
        np.testing.assert_array_equal(T[:, 0], expected)

    def test_ones_absorb(self):
        T = khatri_rao_skip([np.ones((2, 2)), np.ones((3, 2)), np.ones((5, 2))], 2)
        np.testing.assert_array_equal(T, np.ones((6, 2)))

    def test_mismatched_columns(self):
        with pytest.raises(ShapeError):
            khatri_rao([np.ones((2, 2)), np.ones((2, 3))])


class TestKernels:
    @given(shapes, st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_reconstruction_and_unfold_identity(self, shape, R, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        Y = reconstruct(m).data
        np.testing.assert_allclose(Y, dense_tensor_from_model(m.weights, m.factors), atol=1e-12)
        for n in range(len(shape)):
            np.testing.assert_allclose(unfold(Y, n), m.absorbed(n) @ khatri_rao_skip(m.factors, n).T,
                                       atol=1e-12)

    @given(shapes, st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_mttkrp_matches_explicit_product(self, shape, R, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        X = rng.standard_normal(shape)
        for n in range(len(shape)):
            np.testing.assert_allclose(mttkrp(X, m, n), unfold(X, n) @ khatri_rao_skip(m.factors, n),
                                       atol=1e-11)

    def test_grams(self, rng):
        m = random_model(rng, (3, 4, 2), 3)
        G1 = m.factors[1].T @ m.factors[1]
        G2 = m.factors[2].T @ m.factors[2]
        np.testing.assert_allclose(gram_skip(m, 0), G1 * G2)
        T = khatri_rao_skip(m.factors, 0)
        np.testing.assert_allclose(gram_skip(m, 0), T.T @ T, atol=1e-12)
        np.testing.assert_allclose(gram_full(m), gram_skip(m, 0) * (m.factors[0].T @ m.factors[0]))

    @given(shapes, st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_fast_residual_agrees(self, shape, R, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        X = rng.standard_normal(shape)
        slow = residual_norm(X, m)
        fast = residual_norm(X, m, fast=True)
        assert abs(slow - fast) <= 1e-8 * max(1.0, np.linalg.norm(X))

    def test_exact_model_has_zero_error(self, rng):
        m = random_model(rng, (3, 3, 3), 2)
        assert relative_error(reconstruct(m), m) < 1e-14

    def test_shape_mismatch(self, rng):
        m = random_model(rng, (3, 3), 2)
        with pytest.raises(ShapeError):
            residual_norm(np.zeros((3, 4)), m)


class TestNormalization:
    @given(shapes, st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_normalize_and_balance_keep_reconstruction(self, shape, R, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, shape, R)
        m.weights[0] *= -1.0
        Y = reconstruct(m).data
        nm = normalize(m)
        assert np.all(nm.weights >= 0)
        for U in nm.factors:
            np.testing.assert_allclose(np.linalg.norm(U, axis=0), 1.0)
        np.testing.assert_allclose(reconstruct(nm).data, Y, atol=1e-12)
        bm = balance(m)
        np.testing.assert_allclose(reconstruct(bm).data, Y, atol=1e-12)
        np.testing.assert_allclose(bm.eta_sq_norm(), m.eta_sq_norm(), rtol=1e-12)
        norms = [np.linalg.norm(U, axis=0) for U in bm.factors]
        for nrm in norms[1:]:
            np.testing.assert_allclose(nrm, norms[0], rtol=1e-12)

    def test_eta_sq_norm_any_scaling(self, rng):
        m = random_model(rng, (2, 3, 4), 3)
        expected = sum(
            float(np.sum(dense_tensor_from_model([m.weights[r]], [U[:, [r]] for U in m.factors]) ** 2))
            for r in range(3)
        )
        assert np.isclose(m.eta_sq_norm(), expected, rtol=1e-12)
        assert np.isclose(normalize(m).eta_sq_norm(), expected, rtol=1e-12)
        np.testing.assert_allclose(normalize(m).weights ** 2, m.component_norms() ** 2, rtol=1e-12)

    def test_zero_column(self):
        m = KruskalModel(np.ones(2), [np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2))])
        nm = normalize(m)
        assert nm.weights[1] == 0.0
        np.testing.assert_array_equal(nm.factors[0][:, 1], [1.0, 0.0])
