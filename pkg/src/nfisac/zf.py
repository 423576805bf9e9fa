"""Zero-forcing solution stack.

Mirrors the LP loop with two structural differences: the zero-forcing
precoder is a deterministic function of the channels (so every antenna move
rebuilds it and its gain), and a user's positions affect all users'
rates plus the sensing SINR, so the user position block is an augmented
Lagrangian loop rather than plain gradient ascent.
"""

from __future__ import annotations

import numpy as np

from . import geometry, metrics
from .errors import (
    InfeasibleSubproblemError, NumericalError, OptimizationAbort,
    RankDeficiencyError,
)
from .lp import AlmInfo, RunResult
from .params import AlgoParams
from .subsolver import (
    CovarianceSubproblem, leading_eigpair, solve_covariance_subproblem,
)

FOUR_PI = 4.0 * np.pi


def optimal_combiner_zf(channels, state):
    """SINR-optimal unit-norm receive combiner D_z^{-1} f_r / ||.||."""
    n_r = channels.G.shape[0]
    GP = channels.G @ state.P
    Dz = channels.noise_radar * np.eye(n_r, dtype=complex) + GP @ GP.conj().T
    x = np.linalg.solve(Dz, channels.f_r)
    return x / np.linalg.norm(x)


# ---------------------------------------------------------------------------
# shared workspace for the ZF position gradients

class ZfWorkspace:
    """Quantities shared by every ZF position gradient at one evaluation point.

    Built from fresh channels; n_u is assumed common to all users so the
    stacked-channel row block of user k starts at k * n_u.
    """

    def __init__(self, channels, v, u, p_max, gamma0):
        self.channels = channels
        self.v = v
        self.u = u
        self.p_max = float(p_max)
        self.gamma0 = float(gamma0)
        H_stack = np.vstack(channels.H)
        A = H_stack @ H_stack.conj().T
        Ai = metrics.refined_hermitian_inverse(A)
        Ai2 = Ai @ Ai
        self.tr_gram_inv = float(np.real(np.trace(Ai)))
        self.gain2 = self.p_max / self.tr_gram_inv
        self.tr_sens = H_stack.conj().T @ Ai2             # sensitivity of Tr(gram^-1) to H entries
        self.pinv = H_stack.conj().T @ Ai                 # right pseudo-inverse of the stacked channel
        self.g = channels.G.conj().T @ u
        p1g = self.pinv.conj().T @ self.g
        self.pinv_g2 = float(np.real(np.vdot(p1g, p1g)))
        self.tr_f_inv = []          # per-user Tr of the signal-plus-noise inverse
        self.beam_sens = []         # own-channel sensitivity through the sensing beam
        for k, Hk in enumerate(channels.H):
            n_u = Hk.shape[0]
            hv = Hk @ v
            E = np.outer(hv, hv.conj()) + channels.noise_user[k] * np.eye(n_u, dtype=complex)
            F = E + self.gain2 * np.eye(n_u, dtype=complex)
            Fi = np.linalg.inv(F)
            self.tr_f_inv.append(float(np.real(np.trace(Fi))))
            self.beam_sens.append(np.outer(v, hv.conj() @ (Fi - np.linalg.inv(E))))
        D = np.outer(p1g, self.g.conj())              # (K n_u, n_t)
        self.quad_sens = H_stack.conj().T @ D @ H_stack.conj().T @ Ai2
        self.quad_sens_ct = (Ai @ D - D @ H_stack.conj().T @ Ai2 @ H_stack).T


def _user_geometry(scenario, placement, channels, k):
    phases = channels.H[k] / channels.rho[k]
    dist = geometry.pairwise_distances(placement.q[k], placement.t)
    diff_user = placement.q[k][:, None, :2] - placement.t[None, :, :2]
    return phases, dist, diff_user


def grad_user_rate_zf(scenario, placement, channels, ws, k, user):
    """d R_{Z,user} / d(x,y) of user k's antennas, shape (n_u, 2)."""
    n_u = channels.H[k].shape[0]
    s_u = ws.p_max * ws.tr_gram_inv ** -2 * ws.tr_f_inv[user]
    cols = slice(k * n_u, (k + 1) * n_u)
    coef = s_u * ws.tr_sens[:, cols]
    if user == k:
        coef = coef + ws.beam_sens[k]
    phases, dist, diff = _user_geometry(scenario, placement, channels, k)
    core = coef.T * phases / dist                     # (n_u, n_t)
    pref = -FOUR_PI * channels.rho[k] / scenario.lam
    gx = pref * np.imag(np.sum(core * diff[:, :, 0], axis=1))
    gy = pref * np.imag(np.sum(core * diff[:, :, 1], axis=1))
    return np.stack([gx, gy], axis=1)


def grad_user_wsr_zf(scenario, placement, channels, ws, weights, k):
    """Weighted sum over users of the per-user ZF rate gradients."""
    n_u = channels.H[k].shape[0]
    s_w = ws.p_max * ws.tr_gram_inv ** -2 * float(
        np.asarray(weights) @ np.asarray(ws.tr_f_inv))
    cols = slice(k * n_u, (k + 1) * n_u)
    coef = s_w * ws.tr_sens[:, cols] + weights[k] * ws.beam_sens[k]
    phases, dist, diff = _user_geometry(scenario, placement, channels, k)
    core = coef.T * phases / dist
    pref = -FOUR_PI * channels.rho[k] / scenario.lam
    gx = pref * np.imag(np.sum(core * diff[:, :, 0], axis=1))
    gy = pref * np.imag(np.sum(core * diff[:, :, 1], axis=1))
    return np.stack([gx, gy], axis=1)


def grad_user_sinr_deficit_zf(scenario, placement, channels, ws, k):
    """d sinr_deficit_zf / d(x,y) of user k's antennas, shape (n_u, 2)."""
    n_u = channels.H[k].shape[0]
    cols = slice(k * n_u, (k + 1) * n_u)
    phases, dist, diff = _user_geometry(scenario, placement, channels, k)
    pref = FOUR_PI * channels.rho[k] / scenario.lam
    core1 = ws.tr_sens[:, cols].T * phases / dist
    c_beta = ws.gamma0 * ws.pinv_g2 * ws.p_max * ws.tr_gram_inv ** -2
    core2 = (ws.quad_sens[:, cols].T * phases + ws.quad_sens_ct[:, cols].T * phases.conj()) / dist
    out = np.empty((n_u, 2))
    for axis in range(2):
        d_ax = diff[:, :, axis]
        out[:, axis] = (-c_beta * pref * np.imag(np.sum(core1 * d_ax, axis=1))
                        + ws.gamma0 * ws.gain2 * pref
                        * np.imag(np.sum(core2 * d_ax, axis=1)))
    return out


def grad_bs_rate_zf(scenario, placement, channels, ws, user):
    """d R_{Z,user} / d(x,y) of the BS transmit antennas, shape (n_t, 2)."""
    n_t = placement.t.shape[0]
    s_u = ws.p_max * ws.tr_gram_inv ** -2 * ws.tr_f_inv[user]
    out = np.zeros((n_t, 2))
    for k, Hk in enumerate(channels.H):
        n_u = Hk.shape[0]
        cols = slice(k * n_u, (k + 1) * n_u)
        phases = Hk / channels.rho[k]
        dist = geometry.pairwise_distances(placement.q[k], placement.t)
        diff = placement.t[:, None, :2] - placement.q[k][None, :, :2]
        coef = s_u * channels.rho[k] * ws.tr_sens[:, cols]
        if k == user:
            coef = coef + channels.rho[user] * ws.beam_sens[user]
        core = coef * phases.T / dist.T               # (n_t, n_u)
        for axis in range(2):
            out[:, axis] -= (FOUR_PI / scenario.lam) * np.imag(
                np.sum(core * diff[:, :, axis], axis=1))
    return out


def grad_bs_wsr_zf(scenario, placement, channels, ws, weights):
    g = np.zeros((placement.t.shape[0], 2))
    for user in range(len(channels.H)):
        if weights[user] != 0.0:
            g += weights[user] * grad_bs_rate_zf(scenario, placement, channels,
                                                 ws, user)
    return g


def grad_bs_sinr_deficit_zf(scenario, placement, channels, ws):
    """d sinr_deficit_zf / d(x,y) of the BS transmit antennas, shape (n_t, 2)."""
    t = placement.t
    n_t = t.shape[0]
    # sensing-channel term through f_t, weighted by the precoder covariance
    # minus the beam covariance
    M = ws.gamma0 * ws.gain2 * (ws.pinv @ ws.pinv.conj().T) - np.outer(ws.v, ws.v.conj())
    e = np.vdot(channels.f_r, ws.u) * (ws.u.conj() @ channels.G @ M)
    s = scenario.target
    d_s = np.linalg.norm(t - s[None, :], axis=1)
    diff_s = t[:, :2] - s[None, :2]
    core_s = e * channels.f_t / d_s
    out = np.empty((n_t, 2))
    for axis in range(2):
        out[:, axis] = -(FOUR_PI * channels.rho_s / scenario.lam) * np.imag(
            core_s * diff_s[:, axis])
    c_beta = ws.gamma0 * ws.pinv_g2 * ws.p_max * ws.tr_gram_inv ** -2
    for k, Hk in enumerate(channels.H):
        n_u = Hk.shape[0]
        cols = slice(k * n_u, (k + 1) * n_u)
        phases = Hk / channels.rho[k]
        dist = geometry.pairwise_distances(placement.q[k], placement.t)
        diff = t[:, None, :2] - placement.q[k][None, :, :2]
        core1 = ws.tr_sens[:, cols] * phases.T / dist.T
        core2 = (ws.quad_sens[:, cols] * phases.T + ws.quad_sens_ct[:, cols] * phases.conj().T) / dist.T
        pref = FOUR_PI * channels.rho[k] / scenario.lam
        for axis in range(2):
            d_ax = diff[:, :, axis]
            out[:, axis] += (-c_beta * pref * np.imag(np.sum(core1 * d_ax, axis=1))
                             + ws.gamma0 * ws.gain2 * pref
                             * np.imag(np.sum(core2 * d_ax, axis=1)))
    return out


# ---------------------------------------------------------------------------
# blocks

def optimize_sense_beam_zf(channels, state, weights, gamma0, zeta, params=None):
    """SCA + rank-1 penalty update of v for the ZF scheme."""
    params = params or AlgoParams()
    V = np.outer(state.v, state.v.conj())
    prev_bar = None
    for _ in range(params.sca_max):
        sub = CovarianceSubproblem("zf", channels, V, weights, gamma0, state.u,
                                   zeta, gain=state.gain, P=state.P)
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
    if metrics.sinr_deficit_zf_p(channels, state.P, v_unit, state.u, gamma0) <= tol:
        return v_unit, ratio, flags
    flags.append("v_not_renormalized")
    return np.sqrt(max(beta_max, 0.0)) * chi, ratio, flags


def _zf_eval(scenario, placement, state, weights, gamma0, scale,
             base_channels=None, user=None):
    """Rates / WSR / scaled SINR deficit at a placement, precoder rebuilt fresh."""
    if base_channels is not None and user is not None:
        ch = geometry.rebuild_user_channel(scenario, base_channels, placement, user)
    else:
        ch = geometry.build_channels(scenario, placement)
    st = metrics.make_zf_state(ch, state.v, state.u, scenario.p_max)
    rates = metrics.zf_rates(ch, st)
    kap = metrics.sinr_deficit_zf(ch, st, gamma0) / scale
    return ch, st, rates, float(np.asarray(weights) @ rates), kap


def _alm_positions_zf(scenario, placement, channels, state, weights, gamma0,
                      params, eta, which, user=None):
    """Shared ALM/PGM engine for the ZF position blocks.

    ``which`` selects the moving array ("user" or "bs"); every accepted step
    recomputes the stacked channel and the ZF precoder.  A rank-deficient
    candidate counts as a failed line-search trial.
    """
    scale = metrics.sinr_deficit_scale(channels, gamma0)
    pl = placement
    ch = channels
    st = metrics.refresh_zf_state(state, ch, scenario.p_max)
    rates = metrics.zf_rates(ch, st)
    wsr_c = float(np.asarray(weights) @ rates)
    kap = metrics.sinr_deficit_zf(ch, st, gamma0) / scale
    info = AlmInfo(sinr_deficit_scaled=kap)
    p0 = params.p0
    step0 = params.alpha0 if which == "user" else params.nu0
    wsr_prev = wsr_c
    if which == "user":
        region = scenario.user_regions[user]
        pos = pl.q[user]
    else:
        region = scenario.tx_region
        pos = pl.t
    for outer in range(params.alm_max_outer):
        p = 0.0 if (kap <= 0.0 and eta == 0.0) else p0

        def lagrangian(w, k):
            return -w + eta * k + 0.5 * p * k * k

        L_cur = lagrangian(wsr_c, kap)
        step = step0
        for _n in range(params.inner_pgm_max):
            ws = ZfWorkspace(ch, st.v, st.u, scenario.p_max, gamma0)
            if which == "user":
                grad = -grad_user_wsr_zf(scenario, pl, ch, ws, weights, user)
                gk = grad_user_sinr_deficit_zf(scenario, pl, ch, ws, user)
            else:
                grad = -grad_bs_wsr_zf(scenario, pl, ch, ws, weights)
                gk = grad_bs_sinr_deficit_zf(scenario, pl, ch, ws)
            if eta != 0.0 or p != 0.0:
                grad = grad + (eta + p * kap) * (gk / scale)
            s = step
            accepted = False
            for _ls in range(params.max_ls):
                cand = pos.copy()
                cand[:, :2] = pos[:, :2] - s * grad
                cand = geometry.project_points_to_region(cand, region)
                delta2 = float(np.sum((cand - pos) ** 2))
                if delta2 == 0.0:
                    break
                if not geometry.min_spacing_ok(cand, scenario.d_min):
                    s *= params.tau
                    continue
                pl_c = pl.with_q(user, cand) if which == "user" else pl.with_t(cand)
                try:
                    ch_c, st_c, rates_c, wsr_cc, kap_c = _zf_eval(
                        scenario, pl_c, st, weights, gamma0, scale,
                        base_channels=ch if which == "user" else None,
                        user=user if which == "user" else None)
                except RankDeficiencyError:
                    s *= params.tau
                    continue
                L_c = lagrangian(wsr_cc, kap_c)
                if L_cur - L_c >= params.delta * delta2:
                    pos, pl, ch, st = cand, pl_c, ch_c, st_c
                    rates, wsr_c, kap = rates_c, wsr_cc, kap_c
                    L_prev, L_cur = L_cur, L_c
                    step = s * 2.0
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
    return pl, ch, st, eta, info


def optimize_user_positions_alm_zf(scenario, placement, channels, state,
                                   weights, gamma0, k, params=None, eta=0.0):
    params = params or AlgoParams()
    return _alm_positions_zf(scenario, placement, channels, state, weights,
                             gamma0, params, eta, "user", user=k)


def optimize_bs_positions_alm_zf(scenario, placement, channels, state,
                                 weights, gamma0, params=None, eta=0.0):
    params = params or AlgoParams()
    return _alm_positions_zf(scenario, placement, channels, state, weights,
                             gamma0, params, eta, "bs")


# ---------------------------------------------------------------------------
# overall alternating optimization

def initial_zf_state(scenario, channels, params=None):
    from .lp import initial_sense_beam

    params = params or AlgoParams()
    u0 = channels.f_r / np.sqrt(scenario.n_r)
    P, gain = metrics.zf_precoder(channels, scenario.p_max)
    scale0 = metrics.sinr_deficit_scale(channels, scenario.gamma0)

    def deficit_of_v(v):
        return metrics.sinr_deficit_zf_p(channels, P, v, u0, scenario.gamma0)

    v0 = initial_sense_beam(channels, deficit_of_v, params.tol_feas * scale0)
    return metrics.ZfState(v=v0, u=u0, P=P, gain=gain,
                           channel_tag=channels.tag)


def _zf_snapshot(channels, state, weights, gamma0, scale):
    rates = metrics.zf_rates(channels, state)
    return (rates, float(np.asarray(weights) @ rates),
            metrics.sinr_zf(channels, state),
            metrics.sinr_deficit_zf(channels, state, gamma0) / scale)


def run_zf(scenario, placement, params=None, zeta=1.0, fixed_positions=False):
    """Alternating optimization for the ZF scheme.

    Same acceptance discipline as run_lp: a block's candidate is adopted
    only if it is feasible and does not lose WSR, so the recorded trace is
    non-decreasing and the precoder is always fresh for the channels in hand.
    """
    params = params or AlgoParams()
    placement.validate(scenario)
    channels = geometry.build_channels(scenario, placement)
    weights = scenario.weights
    gamma0 = scenario.gamma0
    scale = metrics.sinr_deficit_scale(channels, gamma0)
    tol = params.tol_feas

    state = initial_zf_state(scenario, channels, params)
    trace = []
    rates, wsr_cur, gam, kap = _zf_snapshot(channels, state, weights, gamma0, scale)
    run_flags = set()
    if kap > tol:
        run_flags.add("initial_sinr_infeasible")
    trace.append(metrics.TraceRecord(0, "init", wsr_cur, gam, kap * scale,
                                     float(np.sum(np.abs(state.P) ** 2)),
                                     tuple(rates)))

    eta_q = [0.0] * scenario.n_users
    eta_t = 0.0
    rank_flags = 0
    rejects = 0
    fail_streak = 0
    converged = False
    outer = 0
    for outer in range(1, params.max_outer + 1):
        wsr_start = wsr_cur
        loop_failed = False

        def record(block, flags=()):
            trace.append(metrics.TraceRecord(
                outer, block, wsr_cur, gam, kap * scale,
                float(np.sum(np.abs(state.P) ** 2)), tuple(rates),
                tuple(flags)))

        # receive combiner: leaves the rates untouched, never hurts feasibility
        state.u = optimal_combiner_zf(channels, state)
        rates, wsr_cur, gam, kap = _zf_snapshot(channels, state, weights, gamma0, scale)
        record("u")

        # sensing transmit beamformer
        try:
            v_new, ratio, v_flags = optimize_sense_beam_zf(
                channels, state, weights, gamma0, zeta, params)
            if ratio < 0.99:
                rank_flags += 1
            cand = state.copy()
            cand.v = v_new
            c_rates, c_wsr, c_gam, c_kap = _zf_snapshot(channels, cand, weights,
                                                        gamma0, scale)
            if c_kap <= max(tol, kap) and c_wsr >= wsr_cur - params.wsr_slack \
                    and np.linalg.norm(v_new) <= 1.0 + 1e-9:
                state, rates, wsr_cur, gam, kap = cand, c_rates, c_wsr, c_gam, c_kap
            else:
                rejects += 1
                v_flags = list(v_flags) + ["v_block_rejected"]
            run_flags.update(v_flags)
        except (InfeasibleSubproblemError, NumericalError):
            loop_failed = True
        record("v")

        if not fixed_positions:
            for k in range(scenario.n_users):
                try:
                    pl_c, ch_c, st_c, eta_q[k], _ = optimize_user_positions_alm_zf(
                        scenario, placement, channels, state, weights, gamma0,
                        k, params, eta_q[k])
                    c_rates, c_wsr, c_gam, c_kap = _zf_snapshot(
                        ch_c, st_c, weights, gamma0, scale)
                    if c_kap <= max(tol, kap) and c_wsr >= wsr_cur - params.wsr_slack:
                        placement, channels, state = pl_c, ch_c, st_c
                        rates, wsr_cur, gam, kap = c_rates, c_wsr, c_gam, c_kap
                    else:
                        rejects += 1
                except (InfeasibleSubproblemError, NumericalError, RankDeficiencyError):
                    loop_failed = True
                record(f"q{k}")

            try:
                pl_c, ch_c, st_c, eta_t, _ = optimize_bs_positions_alm_zf(
                    scenario, placement, channels, state, weights, gamma0,
                    params, eta_t)
                c_rates, c_wsr, c_gam, c_kap = _zf_snapshot(ch_c, st_c, weights,
                                                            gamma0, scale)
                if c_kap <= max(tol, kap) and c_wsr >= wsr_cur - params.wsr_slack:
                    placement, channels, state = pl_c, ch_c, st_c
                    rates, wsr_cur, gam, kap = c_rates, c_wsr, c_gam, c_kap
                else:
                    rejects += 1
            except (InfeasibleSubproblemError, NumericalError, RankDeficiencyError):
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
