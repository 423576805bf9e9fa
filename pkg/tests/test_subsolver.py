import math

import numpy as np
import pytest

from nfisac import metrics, verify
from nfisac.errors import ContractViolation, InfeasibleSubproblemError
from nfisac.subsolver import (
    CovarianceSubproblem, PrecoderSubproblem, SubParams, leading_eigpair,
    psd_trace_project, rhat_lower_bound, solve_covariance_subproblem,
    solve_precoder_subproblem,
)


def _precoder_sub(scenario, channels, state, gamma0=None):
    return PrecoderSubproblem(channels, state.W, state.v, state.u,
                              scenario.weights, scenario.p_max,
                              scenario.gamma0 if gamma0 is None else gamma0)


def _random_hermitian(rng, n):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return 0.5 * (A + A.conj().T)


class TestLeadingEigpair:
    def test_diagonal(self):
        beta, chi = leading_eigpair(np.diag([3.0, 1.0]).astype(complex))
        assert beta == pytest.approx(3.0)
        np.testing.assert_allclose(np.abs(chi), [1.0, 0.0], atol=1e-12)

    def test_identity_degenerate(self):
        beta, chi = leading_eigpair(np.eye(3, dtype=complex))
        assert beta == pytest.approx(1.0)
        assert np.linalg.norm(chi) == pytest.approx(1.0)

    def test_matches_full_spectrum(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            V = _random_hermitian(rng, 5)
            beta, chi = leading_eigpair(V)
            vals = np.linalg.eigvalsh(V)
            assert beta == pytest.approx(vals[-1], rel=1e-12)
            resid = np.linalg.norm(V @ chi - beta * chi)
            assert resid <= 1e-9 * max(np.linalg.norm(V), 1.0)
            assert np.linalg.norm(chi) == pytest.approx(1.0, abs=1e-12)

    def test_non_hermitian_rejected(self):
        with pytest.raises(ContractViolation):
            leading_eigpair(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestPsdTraceProject:
    def test_identity_on_feasible(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=2) + 1j * rng.normal(size=2)
        V = 0.3 * np.outer(x, x.conj()) / np.linalg.norm(x) ** 2
        np.testing.assert_allclose(psd_trace_project(V), V, atol=1e-14)

    def test_output_feasible_and_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            V = _random_hermitian(rng, 3)
            P = psd_trace_project(V)
            vals = np.linalg.eigvalsh(P)
            assert vals.min() >= -1e-12
            assert vals.sum() <= 1.0 + 1e-12
            np.testing.assert_allclose(psd_trace_project(P), P, atol=1e-12)

    def test_close_to_exact_projection_2x2(self):
        # oracle: exact Euclidean projection = eigenbasis + projection of the
        # eigenvalue vector onto {l >= 0, sum l <= 1}
        rng = np.random.default_rng(6)
        for _ in range(100):
            V = _random_hermitian(rng, 2)
            vals, vecs = np.linalg.eigh(V)
            lam = vals.copy()
            # project eigenvalues onto the simplex-capped orthant
            lam = np.maximum(lam, 0.0)
            if lam.sum() > 1.0:
                mu = (lam.sum() - 1.0) / (lam > 0).sum()
                lam = np.maximum(lam - mu, 0.0)
                if lam.sum() > 1.0:
                    lam = np.maximum(lam - (lam.sum() - 1.0), 0.0)
            exact = (vecs * lam) @ vecs.conj().T
            two_step = psd_trace_project(V)
            d_two = np.linalg.norm(two_step - V)
            d_exact = np.linalg.norm(exact - V)
            assert d_two <= 1.6 * d_exact + 1e-12


class TestPrecoderSurrogate:
    def test_tight_at_expansion(self, scenario, channels, lp_state):
        sub = _precoder_sub(scenario, channels, lp_state)
        bounds = rhat_lower_bound(sub, lp_state.W)
        for k in range(scenario.n_users):
            true = metrics.rate_lp(channels, lp_state, k)
            assert bounds[k] == pytest.approx(true, abs=1e-9)

    def test_global_lower_bound_sampled(self, scenario, channels, lp_state):
        sub = _precoder_sub(scenario, channels, lp_state)
        rng = np.random.Generator(np.random.Philox(key=[17, 3]))
        for _ in range(100):
            cand = verify.random_lp_state(scenario, channels, rng,
                                          power_fraction=rng.uniform(0.1, 1.0))
            cand.v = lp_state.v
            bounds = rhat_lower_bound(sub, cand.W)
            for k in range(scenario.n_users):
                true = metrics.rate_lp_w(channels, cand.W, lp_state.v, k)
                assert bounds[k] <= true + 1e-9

    def test_finite_at_zero(self, scenario, channels, lp_state):
        sub = _precoder_sub(scenario, channels, lp_state)
        zeros = [np.zeros_like(Wk) for Wk in lp_state.W]
        assert np.all(np.isfinite(rhat_lower_bound(sub, zeros)))

    def test_shape_mismatch_rejected(self, scenario, channels, lp_state):
        sub = _precoder_sub(scenario, channels, lp_state)
        with pytest.raises(ContractViolation):
            rhat_lower_bound(sub, [lp_state.W[0]])


class TestPrecoderSolve:
    def test_power_saturates_without_sensing(self, scenario, channels, lp_state):
        # gamma0 = 0 and v = 0: concave maximization over the power ball
        state = lp_state.copy()
        state.v = np.zeros(scenario.n_t, dtype=complex)
        sub = _precoder_sub(scenario, channels, state, gamma0=0.0)
        W = solve_precoder_subproblem(sub, SubParams())
        power = sum(float(np.sum(np.abs(Wk) ** 2)) for Wk in W)
        assert power == pytest.approx(scenario.p_max, rel=1e-4)
        # KKT: surrogate gradient parallel to the power-constraint gradient
        g = sub.surrogate_grad(np.stack(W))
        Ws = np.stack(W)
        mu = float(np.real(np.vdot(Ws, g)) / np.real(np.vdot(Ws, Ws)))
        resid = np.linalg.norm(g - mu * Ws) / np.linalg.norm(g)
        assert resid < 5e-3

    def test_stationary_point_fixed(self, scenario, channels, lp_state):
        # iterate expansion+solve until stationary, then one more round must
        # return (numerically) the same point
        state = lp_state.copy()
        state.v = np.zeros(scenario.n_t, dtype=complex)
        W = state.W
        prev = -np.inf
        for _ in range(60):
            sub = PrecoderSubproblem(channels, W, state.v, state.u,
                                     scenario.weights, scenario.p_max, 0.0)
            W = solve_precoder_subproblem(sub, SubParams())
            cur = sub.surrogate_wsr(np.stack(W))
            if cur - prev < 1e-8:
                break
            prev = cur
        sub2 = PrecoderSubproblem(channels, W, state.v, state.u,
                                  scenario.weights, scenario.p_max, 0.0)
        W_again = solve_precoder_subproblem(sub2, SubParams())
        before = sub2.surrogate_wsr(np.stack(W))
        after = sub2.surrogate_wsr(np.stack(W_again))
        assert after >= before - 1e-9
        assert after - before < 1e-6 * (1 + abs(before))

    def test_scalar_case_matches_golden_section(self):
        # K = 1, N_t = N_u = 1, v = 0: the surrogate is a concave scalar
        # function of |w| with a closed-form-checkable argmax
        h = 0.8 * np.exp(0.7j)
        ch = None
        from nfisac import geometry
        ch = geometry.ChannelSet(
            H=(np.array([[h]]),), G=np.array([[1.0 + 0j]]),
            f_t=np.array([1.0 + 0j]), f_r=np.array([1.0 + 0j]),
            rho=np.array([abs(h)]), rho_s=1.0,
            noise_user=np.array([0.5]), noise_radar=1.0)
        W0 = [np.array([[0.4 + 0.1j]])]
        sub = PrecoderSubproblem(ch, W0, np.array([0.0 + 0j]),
                                 np.array([1.0 + 0j]), np.array([1.0]),
                                 p_max=2.0, gamma0=0.0)
        W = solve_precoder_subproblem(sub, SubParams())
        achieved = sub.surrogate_wsr(np.stack(W))

        def surr_of_r(r):
            return sub.surrogate_wsr(np.stack(
                [np.array([[r * np.exp(1j * np.angle(sub.lin[0][0, 0]))]])]))

        lo, hi = 0.0, math.sqrt(2.0)
        phi = (math.sqrt(5) - 1) / 2
        for _ in range(200):
            m1 = hi - phi * (hi - lo)
            m2 = lo + phi * (hi - lo)
            if surr_of_r(m1) >= surr_of_r(m2):
                hi = m2
            else:
                lo = m1
        oracle = surr_of_r(0.5 * (lo + hi))
        assert achieved >= oracle - 1e-6

    def test_infeasible_raises(self, scenario, channels, lp_state):
        # gamma0 so large that even zero power cannot satisfy the constraint
        state = lp_state.copy()
        num = metrics.sensing_power(channels, state.v, state.u)
        gamma0 = 10.0 * num / channels.noise_radar
        sub = _precoder_sub(scenario, channels, state, gamma0=gamma0)
        with pytest.raises(InfeasibleSubproblemError):
            solve_precoder_subproblem(sub, SubParams())

    def test_feasibility_enforced(self, scenario, channels, lp_state):
        # binding sensing constraint: returned point satisfies it
        state = lp_state.copy()
        state.v = channels.f_t / math.sqrt(scenario.n_t)
        state.u = channels.f_r / math.sqrt(scenario.n_r)
        num = metrics.sensing_power(channels, state.v, state.u)
        gamma0 = 0.5 * num / channels.noise_radar
        sub = _precoder_sub(scenario, channels, state, gamma0=gamma0)
        W = solve_precoder_subproblem(sub, SubParams())
        kap = sub.deficit(np.stack(W)) / sub.sinr_deficit_scale
        assert kap <= SubParams().tol_feas
        assert sub.surrogate_wsr(np.stack(W)) >= \
            sub.surrogate_wsr(sub.W0) - 1e-9


def _cov_sub(scenario, channels, state, V0, zeta=1.0, gamma0=None, mode="lp",
             zf_state=None):
    gamma0 = scenario.gamma0 if gamma0 is None else gamma0
    if mode == "lp":
        return CovarianceSubproblem("lp", channels, V0, scenario.weights,
                                    gamma0, state.u, zeta, W=state.W)
    return CovarianceSubproblem("zf", channels, V0, scenario.weights, gamma0,
                                zf_state.u, zeta, gain=zf_state.gain,
                                P=zf_state.P)


class TestCovarianceSurrogate:
    def test_lp_bound_tight_and_global(self, scenario, channels, lp_state):
        V0 = np.outer(lp_state.v, lp_state.v.conj())
        sub = _cov_sub(scenario, channels, lp_state, V0)
        vals = sub.bound_values(V0)
        for k in range(scenario.n_users):
            true = metrics.rate_lp_cov(channels, lp_state.W, V0, k)
            assert vals[k] == pytest.approx(true, abs=1e-9)
        rng = np.random.Generator(np.random.Philox(key=[23, 1]))
        for _ in range(100):
            x = rng.normal(size=scenario.n_t) + 1j * rng.normal(size=scenario.n_t)
            V = np.outer(x, x.conj())
            V *= rng.uniform(0, 1) / np.real(np.trace(V))
            vals = sub.bound_values(V)
            for k in range(scenario.n_users):
                true = metrics.rate_lp_cov(channels, lp_state.W, V, k)
                assert vals[k] <= true + 1e-9

    def test_zf_bound_tight_and_global(self, scenario, channels, zf_state):
        V0 = np.outer(zf_state.v, zf_state.v.conj())
        sub = _cov_sub(scenario, channels, None, V0, mode="zf", zf_state=zf_state)
        vals = sub.bound_values(V0)
        for k in range(scenario.n_users):
            true = metrics.rate_zf_cov(channels, zf_state.gain, V0, k)
            assert vals[k] == pytest.approx(true, abs=1e-9)
        rng = np.random.Generator(np.random.Philox(key=[23, 2]))
        for _ in range(100):
            V = np.zeros((scenario.n_t, scenario.n_t), dtype=complex)
            for _r in range(rng.integers(1, 3)):
                x = rng.normal(size=scenario.n_t) + 1j * rng.normal(size=scenario.n_t)
                V += np.outer(x, x.conj())
            V *= rng.uniform(0, 1) / np.real(np.trace(V))
            vals = sub.bound_values(V)
            for k in range(scenario.n_users):
                true = metrics.rate_zf_cov(channels, zf_state.gain, V, k)
                assert vals[k] <= true + 1e-9


class TestCovarianceSolve:
    def test_fixed_point_returned_unchanged(self, scenario, channels, lp_state):
        V0 = np.outer(lp_state.v, lp_state.v.conj())
        sub = _cov_sub(scenario, channels, lp_state, V0, zeta=1.0, gamma0=0.0)
        V1 = solve_covariance_subproblem(sub, SubParams())
        sub2 = _cov_sub(scenario, channels, lp_state, V1, zeta=1.0, gamma0=0.0)
        V2 = solve_covariance_subproblem(sub2, SubParams())
        obj1 = sub2.objective(V1)
        obj2 = sub2.objective(V2)
        assert obj2 >= obj1 - 1e-9

    def test_scalar_grid_oracle(self):
        # N_t = 1: V is a scalar in [0, 1]
        from nfisac import geometry
        ch = geometry.ChannelSet(
            H=(np.array([[0.9 + 0.2j]]),), G=np.array([[1.0 + 0j]]),
            f_t=np.array([1.0 + 0j]), f_r=np.array([1.0 + 0j]),
            rho=np.array([0.92]), rho_s=1.0,
            noise_user=np.array([0.4]), noise_radar=1.0)
        W = [np.array([[1.1 - 0.3j]])]
        V0 = np.array([[0.5 + 0j]])
        sub = CovarianceSubproblem("lp", ch, V0, np.array([1.0]), 0.0,
                                   np.array([1.0 + 0j]), zeta=1.0, W=W)
        V = solve_covariance_subproblem(sub, SubParams())
        grid = np.linspace(0, 1, 20001)
        vals = [sub.objective(np.array([[g + 0j]])) for g in grid]
        assert sub.objective(V) >= max(vals) - 1e-6

    def test_rank_one_drive(self, scenario, channels, lp_state):
        # single user weight, sensing constraint reduced to a floor that
        # keeps Tr(V) > 0: growing zeta drives the iterate toward rank-1
        rng = np.random.Generator(np.random.Philox(key=[29, 0]))
        X = rng.normal(size=(scenario.n_t, 2)) + 1j * rng.normal(size=(scenario.n_t, 2))
        V0 = X @ X.conj().T
        V0 /= 2 * np.real(np.trace(V0))
        u = channels.f_r / np.sqrt(scenario.n_r)
        state = lp_state.copy()
        state.W = [1e-3 * Wk for Wk in state.W]
        gamma0 = 0.05 * channels.rho_s**2 * scenario.n_t * scenario.n_r \
            / channels.noise_radar
        ratios = []
        for zeta in (1.0, 10.0, 100.0):
            V = V0.copy()
            for _ in range(6):
                sub = CovarianceSubproblem(
                    "lp", channels, V, np.array([1.0, 0.0]), gamma0, u,
                    zeta, W=state.W)
                V = solve_covariance_subproblem(sub, SubParams())
            vals = np.linalg.eigvalsh(V)
            assert vals.sum() > 0
            ratios.append(vals[-1] / vals.sum())
        assert ratios[-1] >= 0.99

    def test_feasibility_restoration(self, scenario, channels, lp_state):
        # start infeasible: solver must return a feasible covariance
        u = channels.f_r / math.sqrt(scenario.n_r)
        gamma0 = 0.3 * channels.rho_s**2 * scenario.n_t * scenario.n_r \
            / channels.noise_radar
        state = lp_state.copy()
        state.W = [1e-3 * Wk for Wk in state.W]
        state.u = u
        rng = np.random.Generator(np.random.Philox(key=[29, 5]))
        x = verify._random_unit(rng, scenario.n_t)
        V0 = np.outer(x, x.conj())
        sub = _cov_sub(scenario, channels, state, V0, gamma0=gamma0)
        if sub.deficit(V0) / sub.sinr_deficit_scale <= SubParams().tol_feas:
            pytest.skip("random start happened to be feasible")
        V = solve_covariance_subproblem(sub, SubParams())
        assert sub.deficit(V) / sub.sinr_deficit_scale <= SubParams().tol_feas
