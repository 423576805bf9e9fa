"""Linear-precoding solution stack.

Blocks, in the order the alternating loop visits them: closed-form receive
combiner, SCA precoder update, SCA sensing-beamformer update (rank-1 via
eigen-extraction of a penalized covariance), per-user projected gradient
ascent on the antenna positions, and an augmented-Lagrangian loop on the BS
transmit positions.  Analytic position gradients live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, metrics
from .errors import InfeasibleSubproblemError, NumericalError, OptimizationAbort, ScenarioError
from .params import AlgoParams
from .subsolver import (
    CovarianceSubproblem, PrecoderSubproblem, leading_eigpair,
    solve_covariance_subproblem, solve_precoder_subproblem,
)

FOUR_PI = 4.0 * np.pi


# ---------------------------------------------------------------------------
# closed-form combiner

def optimal_combiner_lp(channels, W):
    """SINR-optimal unit-norm receive combiner D_l^{-1} f_r / ||.||."""
    n_r = channels.G.shape[0]
    Dl = channels.noise_radar * np.eye(n_r, dtype=complex)
    for Wu in W:
        GW = channels.G @ Wu
        Dl += GW @ GW.conj().T
    x = np.linalg.solve(Dl, channels.f_r)
    return x / np.linalg.norm(x)


# ---------------------------------------------------------------------------
# analytic gradients (user and BS positions, rate and constraint)

def _lp_rate_workspace(channels, W, v, k):
    """Coefficient matrices of user k's rate differential w.r.t. its channel.

    ``coef_all`` covers the signal-plus-interference log-det, ``coef_rest``
    the interference-only one; the rate gradient is their difference pushed
    through the per-entry channel phase derivatives.
    """
    Hk = channels.H[k]
    n_u = Hk.shape[0]
    n_t = Hk.shape[1]
    cov_all = np.zeros((n_t, n_t), dtype=complex)
    for Wu in W:
        cov_all += Wu @ Wu.conj().T
    cov_all += np.outer(v, v.conj())
    cov_rest = cov_all - W[k] @ W[k].conj().T
    eye = channels.noise_user[k] * np.eye(n_u, dtype=complex)
    rx_all = Hk @ cov_all @ Hk.conj().T + eye
    rx_rest = Hk @ cov_rest @ Hk.conj().T + eye
    coef_all = cov_all @ Hk.conj().T @ np.linalg.inv(rx_all)
    coef_rest = cov_rest @ Hk.conj().T @ np.linalg.inv(rx_rest)
    return coef_all, coef_rest


def grad_user_rate_lp(scenario, placement, channels, W, v, k):
    """d R_{L,k} / d(x,y) of user k's antennas, shape (n_u, 2)."""
    coef_all, coef_rest = _lp_rate_workspace(channels, W, v, k)
    Hk = channels.H[k]
    phases = Hk / channels.rho[k]                    # unit-modulus e^{j 2 pi d / lam}
    q = placement.q[k]
    t = placement.t
    dist = geometry.pairwise_distances(q, t)         # (n_u, n_t)
    core = (coef_rest - coef_all).T * phases / dist  # indexed [b, m]
    diff = q[:, None, :2] - t[None, :, :2]           # x_{k,b} - x_m
    pref = FOUR_PI * channels.rho[k] / scenario.lam
    gx = pref * np.imag(np.sum(core * diff[:, :, 0], axis=1))
    gy = pref * np.imag(np.sum(core * diff[:, :, 1], axis=1))
    return np.stack([gx, gy], axis=1)


def grad_bs_rate_lp(scenario, placement, channels, W, v, k):
    """d R_{L,k} / d(x,y) of the BS transmit antennas, shape (n_t, 2)."""
    coef_all, coef_rest = _lp_rate_workspace(channels, W, v, k)
    Hk = channels.H[k]
    phases = Hk / channels.rho[k]
    q = placement.q[k]
    t = placement.t
    dist = geometry.pairwise_distances(q, t)
    core = (coef_rest - coef_all) * phases.T / dist.T   # indexed [m, b]
    diff = t[:, None, :2] - q[None, :, :2]           # x_m - x_{k,b}
    pref = FOUR_PI * channels.rho[k] / scenario.lam
    gx = pref * np.imag(np.sum(core * diff[:, :, 0], axis=1))
    gy = pref * np.imag(np.sum(core * diff[:, :, 1], axis=1))
    return np.stack([gx, gy], axis=1)


def grad_bs_sinr_deficit_lp(scenario, placement, channels, W, v, u, gamma0):
    """d sinr_deficit_lp / d(x,y) of the BS transmit antennas, shape (n_t, 2)."""
    n_t = placement.t.shape[0]
    M = -np.outer(v, v.conj())
    for Wu in W:
        M += gamma0 * (Wu @ Wu.conj().T)
    e = np.vdot(channels.f_r, u) * (u.conj() @ channels.G @ M)   # (n_t,)
    t = placement.t
    s = scenario.target
    d_s = np.linalg.norm(t - s[None, :], axis=1)
    diff = t[:, :2] - s[None, :2]
    core = e * channels.f_t / d_s
    pref = -FOUR_PI * channels.rho_s / scenario.lam
    gx = pref * np.imag(core * diff[:, 0])
    gy = pref * np.imag(core * diff[:, 1])
    return np.stack([gx, gy], axis=1)


# ---------------------------------------------------------------------------
# SCA blocks

def optimize_precoders(channels, state, weights, p_max, gamma0, params=None):
    """SCA loop on the precoder surrogate until its improvement drops below eps_s."""
    params = params or AlgoParams()
    W = [Wk.copy() for Wk in state.W]
    prev_hat = None
    rounds = 0
    for _ in range(params.sca_max):
        sub = PrecoderSubproblem(channels, W, state.v, state.u, weights, p_max, gamma0)
        W = solve_precoder_subproblem(sub, params.sub)
        hat = sub.surrogate_wsr(np.stack(W))
        rounds += 1
        if prev_hat is not None and hat - prev_hat < params.eps_s:
            break
        prev_hat = hat
    return W, rounds


def optimize_sense_beam_lp(channels, state, weights, gamma0, zeta, params=None):
    """SCA + rank-1 penalty update of the sensing transmit beamformer.

    Returns (v, rank_ratio, flags).  The eigen-extracted vector is
    renormalized to unit norm, which can only decrease sinr_deficit_lp; if even the
    renormalized vector is infeasible the result is flagged for the caller.
    """
    params = params or AlgoParams()
    V = np.outer(state.v, state.v.conj())
    prev_bar = None
    for _ in range(params.sca_max):
        sub = CovarianceSubproblem("lp", channels, V, weights, gamma0, state.u,
                                   zeta, W=state.W)
        V = solve_covariance_subproblem(sub, params.sub)
        bar = float(np.asarray(weights) @ sub.bound_values(V))
        if prev_bar is not None and bar - prev_bar < params.eps_s:
            break
        prev_bar = bar
    beta_max, chi = leading_eigpair(V)
    tr = float(np.real(np.trace(V)))
    ratio = beta_max / tr if tr > 0 else 1.0
    flags = [] if ratio >= 0.99 else ["rank1_ratio_low"]
    scale = metrics.sinr_deficit_scale(channels, gamma0)
    tol = params.tol_feas * scale
    v_unit = chi / np.linalg.norm(chi)
    if metrics.sinr_deficit_lp_w(channels, state.W, v_unit, state.u, gamma0) <= tol:
        return v_unit, ratio, flags
    v_scaled = np.sqrt(max(beta_max, 0.0)) * chi
    flags.append("v_not_renormalized")
    return v_scaled, ratio, flags


# ---------------------------------------------------------------------------
# position blocks

def optimize_user_positions(scenario, placement, channels, state, k, params=None):
    """Projected gradient ascent on R_{L,k} over user k's antenna positions.

    Each accepted step must satisfy the Armijo-Goldstein condition and the
    minimum-spacing constraint; the step size carries over (doubled) between
    accepted steps and is reset by the caller each outer iteration.
    """
    params = params or AlgoParams()
    region = scenario.user_regions[k]
    q = placement.q[k]
    rate = metrics.rate_lp(channels, state, k)
    mu = params.mu0
    steps = 0
    for _ in range(params.pgm_max_steps):
        grad = grad_user_rate_lp(scenario, placement, channels, state.W, state.v, k)
        s = mu
        accepted = False
        for _ls in range(params.max_ls):
            qc = q.copy()
            qc[:, :2] = q[:, :2] + s * grad
            qc = geometry.project_points_to_region(qc, region)
            delta2 = float(np.sum((qc - q) ** 2))
            if delta2 == 0.0:
                break
            if not geometry.min_spacing_ok(qc, scenario.d_min):
                s *= params.tau
                continue
            pl_c = placement.with_q(k, qc)
            ch_c = geometry.rebuild_user_channel(scenario, channels, pl_c, k)
            rate_c = metrics.rate_lp_w(ch_c, state.W, state.v, k)
            if rate_c - rate >= params.delta * delta2:
                improvement = rate_c - rate
                q, placement, channels, rate = qc, pl_c, ch_c, rate_c
                mu = s * 2.0
                accepted = True
                steps += 1
                break
            s *= params.tau
        if not accepted:
            break
        if improvement < params.pgm_tol * (1.0 + abs(rate)):
            break
    return placement, channels, steps


@dataclass
class AlmInfo:
    outer_rounds: int = 0
    inner_steps: int = 0
    sinr_deficit_scaled: float = 0.0
    line_search_exhausted: bool = False


def _lp_eval_t(scenario, placement, t, W, v, u, weights, gamma0, scale):
    pl = placement.with_t(t)
    ch = geometry.build_channels(scenario, pl)
    rates = np.array([metrics.rate_lp_w(ch, W, v, k) for k in range(scenario.n_users)])
    kap = metrics.sinr_deficit_lp_w(ch, W, v, u, gamma0) / scale
    return pl, ch, rates, float(np.asarray(weights) @ rates), kap


def optimize_bs_positions_alm(scenario, placement, channels, state, weights,
                              gamma0, params=None, eta=0.0):
    """ALM over the BS transmit positions: inner PGM on the penalized
    objective, then multiplier/penalty updates, until the WSR stabilizes.

    Returns (placement, channels, eta, info); eta persists across calls as
    warm-start dual information.
    """
    params = params or AlgoParams()
    scale = metrics.sinr_deficit_scale(channels, gamma0)
    W, v, u = state.W, state.v, state.u
    t = placement.t
    pl, ch, rates, wsr_c, kap = _lp_eval_t(
        scenario, placement, t, W, v, u, weights, gamma0, scale)
    info = AlmInfo(sinr_deficit_scaled=kap)
    p0 = params.p0
    wsr_prev = wsr_c
    for outer in range(params.alm_max_outer):
        p = 0.0 if (kap <= 0.0 and eta == 0.0) else p0

        def lagrangian(wsr_val, kap_val):
            return -wsr_val + eta * kap_val + 0.5 * p * kap_val * kap_val

        L_cur = lagrangian(wsr_c, kap)
        nu = params.nu0
        for _n in range(params.inner_pgm_max):
            grad = np.zeros((scenario.n_t, 2))
            for k in range(scenario.n_users):
                grad -= weights[k] * grad_bs_rate_lp(scenario, pl, ch, W, v, k)
            if eta != 0.0 or p != 0.0:
                gk = grad_bs_sinr_deficit_lp(scenario, pl, ch, W, v, u, gamma0) / scale
                grad += (eta + p * kap) * gk
            s = nu
            accepted = False
            for _ls in range(params.max_ls):
                tc = t.copy()
                tc[:, :2] = t[:, :2] - s * grad
                tc = geometry.project_points_to_region(tc, scenario.tx_region)
                delta2 = float(np.sum((tc - t) ** 2))
                if delta2 == 0.0:
                    break
                if not geometry.min_spacing_ok(tc, scenario.d_min):
                    s *= params.tau
                    continue
                pl_c, ch_c, rates_c, wsr_cc, kap_c = _lp_eval_t(
                    scenario, pl, tc, W, v, u, weights, gamma0, scale)
                L_c = lagrangian(wsr_cc, kap_c)
                if L_cur - L_c >= params.delta * delta2:
                    t, pl, ch, rates, wsr_c, kap = tc, pl_c, ch_c, rates_c, wsr_cc, kap_c
                    L_prev, L_cur = L_cur, L_c
                    nu = s * 2.0
                    accepted = True
                    info.inner_steps += 1
                    break
                s *= params.tau
            if not accepted:
                info.line_search_exhausted = True
                break
            denom = max(abs(L_cur), 1e-12 * (1.0 + abs(L_prev)))
            if abs(L_prev - L_cur) / denom < params.eps_l:
                break
        eta = max(0.0, eta + p0 * kap)
        p0 = min(p0 * params.theta, params.p_cap)
        info.outer_rounds = outer + 1
        if abs(wsr_c - wsr_prev) < params.eps_f and (kap <= params.tol_feas or eta == 0.0):
            break
        wsr_prev = wsr_c
    info.sinr_deficit_scaled = kap
    return pl, ch, eta, info


# ---------------------------------------------------------------------------
# overall alternating optimization

@dataclass
class RunResult:
    state: object
    placement: geometry.Placement
    channels: geometry.ChannelSet
    trace: list
    outer_iters: int
    converged: bool
    wsr: float                       # nats
    rates: np.ndarray
    gamma_s: float
    sinr_deficit_scaled: float
    rank_flags: int = 0
    block_rejects: int = 0
    flags: tuple = ()


def initial_sense_beam(channels, deficit_of_v, tol):
    """Feasible unit beam with the least user interference.

    Starts from the bottom eigenvector of sum_k H_k^H H_k and blends toward
    the target response only as far as the sensing constraint requires
    (bisection on the normalized blend; the deficit decreases monotonically toward
    the aligned end after phase-matching the two endpoints).  Starting
    instead fully aligned parks the whole run at maximum echo power whenever
    the interference incentive per SCA round is small, hiding the
    sensing/communication trade-off.
    """
    gram = sum(Hk.conj().T @ Hk for Hk in channels.H)
    _, vecs = np.linalg.eigh(gram)
    v_min = vecs[:, 0]
    if deficit_of_v(v_min) <= tol:
        return v_min
    v_max = channels.f_t / np.linalg.norm(channels.f_t)
    if deficit_of_v(v_max) > tol:
        return v_max                      # nothing feasible; caller handles
    a0 = np.vdot(v_max, v_min)
    if abs(a0) > 0:
        v_min = v_min * (np.conj(a0) / abs(a0))

    def blend(alpha):
        v = (1.0 - alpha) * v_min + alpha * v_max
        return v / np.linalg.norm(v)

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if deficit_of_v(blend(mid)) <= 0.5 * tol:
            hi = mid
        else:
            lo = mid
    return blend(hi)


def initial_lp_state(scenario, channels, params=None):
    """Sensing-aware warm start: conjugate-matched precoders at 90% power,
    the least-interfering feasible sensing beam, boresight combiner;
    precoders rescaled if the sensing constraint still needs headroom."""
    params = params or AlgoParams()
    u0 = channels.f_r / np.sqrt(scenario.n_r)
    scale0 = metrics.sinr_deficit_scale(channels, scenario.gamma0)
    gram = sum(float(np.sum(np.abs(Hk) ** 2)) for Hk in channels.H)
    c = np.sqrt(0.9 * scenario.p_max / gram)
    W = [c * Hk.conj().T for Hk in channels.H]

    def deficit_of_v(v):
        return metrics.sinr_deficit_lp_w(channels, W, v, u0, scenario.gamma0)

    v0 = initial_sense_beam(channels, deficit_of_v, params.tol_feas * scale0)
    state = metrics.LpState(W=W, v=v0, u=u0)
    scale = metrics.sinr_deficit_scale(channels, scenario.gamma0)
    tol = params.tol_feas * scale
    kap = metrics.sinr_deficit_lp(channels, state, scenario.gamma0)
    if kap > tol:
        base = metrics.sinr_deficit_lp_w(channels, [np.zeros_like(Wk) for Wk in W],
                                 v0, u0, scenario.gamma0)
        if base > tol:
            raise ScenarioError(
                "sensing constraint infeasible even with zero transmit power")
        quad = kap - base
        c2 = (tol - base) / quad if quad > 0 else 1.0
        shrink = min(1.0, np.sqrt(max(c2, 0.0)) * (1.0 - 1e-12))
        state = metrics.LpState(W=[shrink * Wk for Wk in W], v=v0, u=u0)
    return state


def _lp_snapshot(channels, state, weights, gamma0, scale):
    rates = metrics.lp_rates(channels, state)
    return (rates, float(np.asarray(weights) @ rates),
            metrics.sinr_lp(channels, state),
            metrics.sinr_deficit_lp(channels, state, gamma0) / scale)


def _lp_feasible(state, p_max, kap_scaled, tol):
    if state.power() > p_max * (1.0 + 1e-6):
        return False
    if abs(np.linalg.norm(state.u) - 1.0) > 1e-9:
        return False
    if np.linalg.norm(state.v) > 1.0 + 1e-9:
        return False
    return kap_scaled <= tol


def run_lp(scenario, placement, params=None, zeta=1.0, fixed_positions=False):
    """Alternating optimization for the linear-precoding scheme.

    Visits u, {W_k}, v, each user's positions, then the BS positions, until
    the WSR change across an outer iteration falls below eps_f.  A block's
    output is only adopted if it keeps the state feasible and does not lose
    WSR; otherwise the previous iterate is retained, which makes the
    recorded WSR trace non-decreasing by construction.
    """
    params = params or AlgoParams()
    placement.validate(scenario)
    channels = geometry.build_channels(scenario, placement)
    weights = scenario.weights
    gamma0 = scenario.gamma0
    scale = metrics.sinr_deficit_scale(channels, gamma0)
    tol = params.tol_feas

    state = initial_lp_state(scenario, channels, params)
    trace = []
    rates, wsr_cur, gam, kap = _lp_snapshot(channels, state, weights, gamma0, scale)
    trace.append(metrics.TraceRecord(0, "init", wsr_cur, gam, kap * scale,
                                     state.power(), tuple(rates)))

    eta = 0.0
    rank_flags = 0
    rejects = 0
    fail_streak = 0
    converged = False
    outer = 0
    run_flags = set()
    for outer in range(1, params.max_outer + 1):
        wsr_start = wsr_cur
        loop_failed = False

        def record(block, flags=()):
            trace.append(metrics.TraceRecord(outer, block, wsr_cur, gam,
                                             kap * scale, state.power(),
                                             tuple(rates), tuple(flags)))

        # receive combiner: closed form, leaves every rate unchanged
        state.u = optimal_combiner_lp(channels, state.W)
        rates, wsr_cur, gam, kap = _lp_snapshot(channels, state, weights, gamma0, scale)
        record("u")

        # communication precoders
        try:
            W_new, _ = optimize_precoders(channels, state, weights,
                                          scenario.p_max, gamma0, params)
            cand = metrics.LpState(W=W_new, v=state.v, u=state.u)
            c_rates, c_wsr, c_gam, c_kap = _lp_snapshot(channels, cand, weights,
                                                        gamma0, scale)
            if _lp_feasible(cand, scenario.p_max, c_kap, tol) and \
                    c_wsr >= wsr_cur - params.wsr_slack:
                state, rates, wsr_cur, gam, kap = cand, c_rates, c_wsr, c_gam, c_kap
            else:
                rejects += 1
        except (InfeasibleSubproblemError, NumericalError):
            loop_failed = True
        record("W")

        # sensing transmit beamformer
        try:
            v_new, ratio, v_flags = optimize_sense_beam_lp(
                channels, state, weights, gamma0, zeta, params)
            if ratio < 0.99:
                rank_flags += 1
            cand = metrics.LpState(W=state.W, v=v_new, u=state.u)
            c_rates, c_wsr, c_gam, c_kap = _lp_snapshot(channels, cand, weights,
                                                        gamma0, scale)
            if _lp_feasible(cand, scenario.p_max, c_kap, tol) and \
                    c_wsr >= wsr_cur - params.wsr_slack:
                state, rates, wsr_cur, gam, kap = cand, c_rates, c_wsr, c_gam, c_kap
            else:
                rejects += 1
                v_flags = list(v_flags) + ["v_block_rejected"]
            run_flags.update(v_flags)
        except (InfeasibleSubproblemError, NumericalError):
            loop_failed = True
        record("v")

        if not fixed_positions:
            # user antenna positions: affect only the owner's rate, never the
            # sensing constraint
            for k in range(scenario.n_users):
                placement, channels, _ = optimize_user_positions(
                    scenario, placement, channels, state, k, params)
                rates, wsr_cur, gam, kap = _lp_snapshot(channels, state, weights,
                                                        gamma0, scale)
                record(f"q{k}")

            # BS transmit positions
            try:
                pl_c, ch_c, eta_c, info = optimize_bs_positions_alm(
                    scenario, placement, channels, state, weights, gamma0,
                    params, eta)
                eta = eta_c
                cand_rates = metrics.lp_rates(ch_c, state)
                cand_wsr = float(weights @ cand_rates)
                cand_kap = metrics.sinr_deficit_lp(ch_c, state, gamma0) / scale
                if cand_kap <= tol and cand_wsr >= wsr_cur - params.wsr_slack:
                    placement, channels = pl_c, ch_c
                    rates, wsr_cur, gam, kap = _lp_snapshot(
                        channels, state, weights, gamma0, scale)
                else:
                    rejects += 1
            except (InfeasibleSubproblemError, NumericalError):
                loop_failed = True
            record("t")

        fail_streak = fail_streak + 1 if loop_failed else 0
        if fail_streak >= 2:
            raise OptimizationAbort(
                f"two consecutive failed AO loops at iteration {outer}")
        if abs(wsr_cur - wsr_start) < params.eps_f:
            converged = True
            break

    return RunResult(state=state, placement=placement, channels=channels,
                     trace=trace, outer_iters=outer, converged=converged,
                     wsr=wsr_cur, rates=rates, gamma_s=gam, sinr_deficit_scaled=kap,
                     rank_flags=rank_flags, block_rejects=rejects,
                     flags=tuple(sorted(run_flags)))
