from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpepc.bounded import BoundConfig, _BoundSchedule, bals, bals_mode_update, bsqp
from cpepc.cpd import SolverOptions, als, als_mode_update, random_init
from cpepc.harness.generators import MatmulSpec, gen_matmul_tensor
from cpepc.tensor import KruskalModel, gram_skip, khatri_rao_skip, reconstruct, residual_norm, unfold
from oracles import ball_minimum


def start(seed, shape=(4, 3, 5), R=3):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal(shape)
    m = random_init(shape, R, rng)
    for n in range(len(shape)):
        m, _ = als_mode_update(Y, m, n)
    return Y, m


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epsilon": 0.0}, {"epsilon": 1.0, "grow_factor": 1.0},
                                    {"epsilon": 1.0, "stall_window": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            BoundConfig(**kw)

    def test_schedule_grows_on_stall(self):
        sched = _BoundSchedule(BoundConfig(epsilon=1.0, adaptive=True, stall_window=3))
        for _ in range(4):
            eps = sched.update(0.5, 0.9)
        assert eps == 2.0

    def test_schedule_shrinks_on_fast_progress(self):
        sched = _BoundSchedule(BoundConfig(epsilon=3.0, adaptive=True, stall_window=2))
        for err in (1.0, 0.5, 0.05):
            eps = sched.update(err, 1.0)
        assert eps == 2.0

    def test_schedule_never_below_norm(self):
        sched = _BoundSchedule(BoundConfig(epsilon=3.0, adaptive=True, stall_window=2))
        for err in (1.0, 0.5, 0.05):
            eps = sched.update(err, 2.9)
        assert eps == 2.9


class TestModeUpdate:
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2), st.floats(0.05, 1.2))
    def test_bound_holds_and_fit_is_optimal(self, seed, mode, frac):
        Y, m = start(seed)
        cur = np.sqrt(np.sum(m.absorbed(mode) ** 2))
        eps = frac * cur
        m2, d = bals_mode_update(Y, m, mode, eps, return_details=True)
        U = m2.absorbed(mode)
        assert np.linalg.norm(U) <= eps * (1 + 1e-12)
        # objective 0.5 x'(Gam (x) I)x - vec(G)'x over the ball, compared in the eigenbasis
        Gam = gram_skip(m, mode)
        T = khatri_rao_skip(m.factors, mode)
        Xn = unfold(Y, mode)
        Hq = np.kron(Gam, np.eye(Y.shape[mode]))
        w, V = np.linalg.eigh(Hq)
        b = V.T @ np.ravel(Xn @ T, order="F")
        best, _ = ball_minimum(w, -b, eps)
        val = 0.5 * np.sum(Xn**2) + best
        assert 0.5 * residual_norm(Y, m2) ** 2 <= val + 1e-9 * max(1.0, abs(val))

    def test_active_update_is_shifted_als(self):
        Y, m = start(4)
        eps = 0.3 * np.sqrt(np.sum(m.absorbed(1) ** 2))
        m2, d = bals_mode_update(Y, m, 1, eps, return_details=True)
        assert d["active"]
        U = d["G"] @ np.linalg.inv(gram_skip(m, 1) + d["lam"] * np.eye(m.rank))
        np.testing.assert_allclose(m2.absorbed(1), U, atol=1e-8)

    def test_inactive_update_is_als(self):
        Y, m = start(5)
        m_als, _ = als_mode_update(Y, m, 0)
        m2, d = bals_mode_update(Y, m, 0, 1e6, return_details=True)
        assert not d["active"]
        np.testing.assert_allclose(m2.absorbed(0), m_als.absorbed(0), atol=1e-10)


class TestSolvers:
    def test_bals_respects_bound(self):
        Y, m = start(6)
        eps = 2.0
        m2, tr = bals(Y, m, BoundConfig(epsilon=eps, max_iters=50))
        # the start is outside the bound, so only the sweeps after the first are monotone
        assert np.all(np.isfinite(tr.rel_errors))
        assert np.all(np.diff(tr.rel_errors[1:]) <= 1e-10)
        assert np.sqrt(np.sum(m2.weights**2)) <= eps * (1 + 1e-10)

    def test_huge_bound_runs_als(self):
        Y, m = start(8)
        m_b, _ = bals(Y, m, BoundConfig(epsilon=1e8, max_iters=20))
        m_a, _ = als(Y, m, SolverOptions(max_iters=20))
        np.testing.assert_allclose(reconstruct(m_b).data, reconstruct(m_a).data, atol=1e-10)

    def test_bsqp_keeps_bound_and_lowers_error(self):
        Y, m = start(7)
        eps = 0.8 * np.sqrt(m.eta_sq_norm())
        m2, tr = bsqp(Y, m, BoundConfig(epsilon=eps, max_iters=100))
        assert m2.eta_sq_norm() <= eps**2 * (1 + 1e-8)
        assert "bsqp: bound never satisfied" not in tr.flags
        feasible = tr.eta_sq_norms <= eps**2 * (1 + 1e-8)
        assert tr.rel_errors[-1] <= tr.rel_errors[np.argmax(feasible)]

    def test_bsqp_fits_exact_low_rank(self):
        rng = np.random.default_rng(0)
        true = KruskalModel(np.ones(2), [rng.standard_normal((I, 2)) for I in (3, 4, 3)])
        Y = reconstruct(true)
        m2, tr = bsqp(Y, random_init(Y.shape, 2, 1), BoundConfig(epsilon=1.0, adaptive=True, max_iters=300))
        assert residual_norm(Y, m2) / Y.norm() < 1e-8
        assert not tr.stalled

    def test_bsqp_on_strassen_tensor(self):
        Y = gen_matmul_tensor(MatmulSpec(2, 2, 2))
        errs = []
        for seed in range(20):
            m2, _ = bsqp(Y, random_init(Y.shape, 7, seed), BoundConfig(epsilon=3.0, adaptive=True, max_iters=500))
            errs.append(residual_norm(Y, m2) / Y.norm())
            if errs[-1] <= 1e-7:
                break
        assert min(errs) <= 1e-7
