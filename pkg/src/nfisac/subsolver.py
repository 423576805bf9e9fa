"""First-order solver for the two SCA convex subproblems.

Both subproblems (precoder update, sensing-covariance update) are smooth
concave maximizations over a simple convex set with one extra scalar
inequality (the SINR deficit) <= 0.  They are solved with projected
gradient ascent wrapped in an augmented-Lagrangian loop on the constraint,
followed by a polish pass
that only accepts feasible iterates.  The best feasible point seen is
returned, so the output never loses surrogate objective relative to a
feasible expansion point.

The deficit carries physical power units; all feasibility logic here
operates on its value divided by the natural scale
(see metrics.sinr_deficit_scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InfeasibleSubproblemError
from . import metrics


@dataclass
class SubParams:
    """Knobs for the first-order subproblem solver."""

    tol_feas: float = 1e-8          # on the scaled SINR deficit
    step0: float = 1.0
    tau: float = 0.5
    armijo: float = 1e-4
    pga_iters: int = 200
    pga_rel_tol: float = 3e-10
    max_backtracks: int = 80
    alm_rounds: int = 5
    alm_p0: float = 1.0
    alm_theta: float = 10.0
    alm_pcap: float = 1e6
    polish_iters: int = 150


def leading_eigpair(V):
    """Largest eigenvalue and a unit eigenvector of a Hermitian matrix."""
    V = np.asarray(V)
    nrm = np.linalg.norm(V)
    if np.linalg.norm(V - V.conj().T) > 1e-10 * max(1.0, nrm):
        raise ContractViolation("leading_eigpair requires a Hermitian matrix")
    vals, vecs = np.linalg.eigh(0.5 * (V + V.conj().T))
    return float(vals[-1]), vecs[:, -1]


def psd_trace_project(V):
    """Project onto {V >= 0} by eigenvalue clipping, then rescale if Tr > 1.

    This two-step map is not the exact Euclidean projection onto the
    intersection, but it always lands inside the set and is the identity on
    it, which is all the backtracked ascent needs.
    """
    V = 0.5 * (V + V.conj().T)
    vals, vecs = np.linalg.eigh(V)
    vals = np.maximum(vals, 0.0)
    tr = float(vals.sum())
    if tr > 1.0:
        vals *= 1.0 / tr
    return (vecs * vals) @ vecs.conj().T


def power_project(Ws, p_max):
    """Radial scaling onto the total-power ball (exact Euclidean projection)."""
    tr = float(np.sum(np.abs(Ws) ** 2))
    if tr > p_max:
        return Ws * np.sqrt(p_max / tr)
    return Ws


def _pga_ascent(x0, value_grad, project, step0, max_iters, tau, armijo,
                rel_tol, max_backtracks, accept_ok=None, on_accept=None,
                fw_oracle=None):
    """Projected gradient ascent with an Armijo-Goldstein backtracked step.

    ``value_grad(x)`` returns (objective, conjugate gradient, *aux); the
    accepted gradient step is doubled for the next iteration, a rejected one
    halved.  ``accept_ok(x, val)``, when given, can veto a candidate (used
    to reject constraint-violating polish steps).

    ``fw_oracle(x, g)``, when given, returns a feasible-direction candidate
    (an in-set extreme point minus x) that is tried with a unit initial step
    before the gradient step.  On the PSD trace ball, plain projected steps
    rotate the leading eigenspace very slowly because eigenvalue clipping
    absorbs most of the movement; the conditional-gradient direction fixes
    that.  Returns (x, objective, step).
    """
    x = np.array(x0, copy=True)
    val = value_grad(x)
    L, g = val[0], val[1]
    if on_accept is not None:
        on_accept(x, val)
    step = step0
    for it in range(max_iters):
        accepted = False
        improve = 0.0
        directions = [("grad", g, step, max_backtracks)]
        if fw_oracle is not None and it % 2 == 0:
            d_fw = fw_oracle(x, g)
            if d_fw is not None:
                directions.insert(0, ("fw", d_fw, 1.0, 16))
        for kind, d, s, tries in directions:
            for _bt in range(tries):
                xn = project(x + s * d)
                dn2 = float(np.sum(np.abs(xn - x) ** 2))
                if dn2 == 0.0:
                    break
                valn = value_grad(xn)
                if valn[0] - L >= armijo * dn2 and (
                        accept_ok is None or accept_ok(xn, valn)):
                    improve = valn[0] - L
                    x, L, g = xn, valn[0], valn[1]
                    if on_accept is not None:
                        on_accept(x, valn)
                    if kind == "grad":
                        step = s * 2.0
                    accepted = True
                    break
                s *= tau
            if accepted:
                break
        if not accepted:
            break
        if improve <= rel_tol * (1.0 + abs(L)):
            break
    return x, L, step


def _constrained_ascent(x0, f_grad, kap, kap_grad, project, restore, params,
                        fw_oracle=None):
    """Maximize f over the projection set subject to the scaled SINR deficit <= 0.

    ALM on the scaled constraint with the paper-style penalty rule
    (p = 0 while feasible with zero multiplier), then a feasibility-
    preserving polish.  Returns the best feasible point encountered.
    """
    tol = params.tol_feas
    best = [None, None]

    def consider(x, f, kv):
        if kv <= tol and (best[0] is None or f > best[0]):
            best[0], best[1] = f, x.copy()

    x = project(np.array(x0, copy=True))
    f0, _ = f_grad(x)
    consider(x, f0, kap(x))
    if best[0] is None:
        x = restore(x)
        if x is None:
            raise InfeasibleSubproblemError("no feasible point reachable from start")
        fr, _ = f_grad(x)
        consider(x, fr, kap(x))
        if best[0] is None:
            raise InfeasibleSubproblemError("restoration produced an infeasible point")

    eta = 0.0
    p0 = params.alm_p0
    step = params.step0
    for _rnd in range(params.alm_rounds):
        kcur = kap(x)
        p = 0.0 if (kcur <= 0.0 and eta == 0.0) else p0

        def vg(z, eta=eta, p=p):
            f, gf = f_grad(z)
            kv = kap(z)
            if eta == 0.0 and p == 0.0:
                return f, gf, f, kv
            gL = gf - (eta + p * kv) * kap_grad(z)
            return f - eta * kv - 0.5 * p * kv * kv, gL, f, kv

        def on_acc(z, val):
            consider(z, val[2], val[3])

        x, _, step = _pga_ascent(
            x, vg, project, step, params.pga_iters, params.tau, params.armijo,
            params.pga_rel_tol, params.max_backtracks, on_accept=on_acc,
            fw_oracle=fw_oracle,
        )
        kv = kap(x)
        if eta == 0.0 and p == 0.0 and kv <= tol:
            break  # optimum of the relaxation is feasible: done
        eta = max(0.0, eta + p0 * kv)
        p0 = min(p0 * params.alm_theta, params.alm_pcap)

    # Polish: ascend f itself from the best feasible point, rejecting any
    # step that would leave the feasible set.
    x = best[1].copy()

    def vg2(z):
        f, gf = f_grad(z)
        return f, gf, f, kap(z)

    def ok(z, val):
        return val[3] <= tol

    def on_acc2(z, val):
        consider(z, val[2], val[3])

    _pga_ascent(
        x, vg2, project, step, params.polish_iters, params.tau, params.armijo,
        params.pga_rel_tol, params.max_backtracks, accept_ok=ok, on_accept=on_acc2,
        fw_oracle=fw_oracle,
    )
    return best[1]


class PrecoderSubproblem:
    """Concave surrogate for the precoder update, frozen at an expansion point.

    Caches the surrogate coefficients (linear term, quadratic form, constants)
    so repeated evaluations during the inner solve are cheap.
    """

    def __init__(self, channels, W0, v, u, weights, p_max, gamma0):
        self.channels = channels
        self.K = len(channels.H)
        if len(W0) != self.K:
            raise ContractViolation("one expansion precoder per user required")
        self.W0 = np.stack([np.asarray(Wk, dtype=complex) for Wk in W0])
        self.v = np.asarray(v, dtype=complex)
        self.u = np.asarray(u, dtype=complex)
        self.weights = np.asarray(weights, dtype=float)
        self.p_max = float(p_max)
        self.gamma0 = float(gamma0)
        self.sinr_deficit_scale = metrics.sinr_deficit_scale(channels, gamma0)
        self.g = channels.G.conj().T @ self.u
        self._deficit_offset = gamma0 * channels.noise_radar * float(
            np.real(np.vdot(self.u, self.u))
        ) - float(np.abs(np.vdot(self.g, self.v)) ** 2)

        self.lin = []        # linear-term coefficients, one (n_t, n_u) per user
        self.quad = []       # per-user quadratic forms (n_t, n_t)
        self.base = np.zeros(self.K)
        for k in range(self.K):
            Hk = channels.H[k]
            n_u = Hk.shape[0]
            S0 = [Hk @ self.W0[j] for j in range(self.K)]
            hv = Hk @ self.v
            F = channels.noise_user[k] * np.eye(n_u, dtype=complex) + np.outer(hv, hv.conj())
            for j in range(self.K):
                if j != k:
                    F += S0[j] @ S0[j].conj().T
            M = F + S0[k] @ S0[k].conj().T
            Fi = np.linalg.inv(F)
            A = Fi - np.linalg.inv(M)       # equals M^-1 S S^H F^-1, but Hermitian by construction
            FiS = Fi @ S0[k]
            c0, _ = metrics.logdet_hpd(
                np.eye(self.W0[k].shape[1], dtype=complex) + S0[k].conj().T @ FiS
            )
            c0 -= float(np.real(np.trace(S0[k].conj().T @ FiS)))
            d = float(np.real(hv.conj() @ A @ hv)) + channels.noise_user[k] * float(
                np.real(np.trace(A))
            )
            self.lin.append(Hk.conj().T @ FiS)
            self.quad.append(Hk.conj().T @ A @ Hk)
            self.base[k] = c0 - d
        self.quad_sum = sum(w * Qk for w, Qk in zip(self.weights, self.quad))

    def per_user_bound(self, W):
        """Surrogate rate of every user at the candidate precoders W."""
        W = [np.asarray(Wk, dtype=complex) for Wk in W]
        if len(W) != self.K or any(Wk.shape != self.W0[k].shape for k, Wk in enumerate(W)):
            raise ContractViolation("candidate precoder shapes do not match the cache")
        out = np.zeros(self.K)
        for k in range(self.K):
            val = self.base[k] + 2.0 * float(np.real(np.trace(self.lin[k].conj().T @ W[k])))
            for j in range(self.K):
                val -= float(np.real(np.trace(W[j].conj().T @ self.quad[k] @ W[j])))
            out[k] = val
        return out

    def surrogate_wsr(self, Ws):
        Ws = np.asarray(Ws)
        val = float(self.weights @ self.base)
        for j in range(self.K):
            val += 2.0 * self.weights[j] * float(np.real(np.trace(self.lin[j].conj().T @ Ws[j])))
            val -= float(np.real(np.trace(Ws[j].conj().T @ self.quad_sum @ Ws[j])))
        return val

    def surrogate_grad(self, Ws):
        g = np.empty_like(Ws)
        for j in range(self.K):
            g[j] = self.weights[j] * self.lin[j] - self.quad_sum @ Ws[j]
        return g

    def surrogate_and_grad(self, Ws):
        Ws = np.asarray(Ws)
        val = float(self.weights @ self.base)
        g = np.empty_like(Ws)
        for j in range(self.K):
            QW = self.quad_sum @ Ws[j]
            val += 2.0 * self.weights[j] * float(np.real(np.trace(self.lin[j].conj().T @ Ws[j])))
            val -= float(np.real(np.trace(Ws[j].conj().T @ QW)))
            g[j] = self.weights[j] * self.lin[j] - QW
        return val, g

    def deficit(self, Ws):
        val = self._deficit_offset
        for j in range(self.K):
            val += self.gamma0 * float(np.linalg.norm(Ws[j].conj().T @ self.g) ** 2)
        return val

    def deficit_grad(self, Ws):
        g = np.empty_like(Ws)
        for j in range(self.K):
            g[j] = self.gamma0 * np.outer(self.g, self.g.conj() @ Ws[j])
        return g


def rhat_lower_bound(sub, W):
    """Per-user concave lower bounds on the LP rates (tight at the expansion)."""
    return sub.per_user_bound(W)


def solve_precoder_subproblem(sub, params=None):
    """Maximize the surrogate WSR over the power ball with the SINR deficit <= 0."""
    params = params or SubParams()
    scale = sub.sinr_deficit_scale
    tol = params.tol_feas

    def f_grad(Ws):
        return sub.surrogate_and_grad(Ws)

    def kap(Ws):
        return sub.deficit(Ws) / scale

    def kap_grad(Ws):
        return sub.deficit_grad(Ws) / scale

    def project(Ws):
        return power_project(Ws, sub.p_max)

    def restore(Ws):
        # deficit(c W) = c^2 a + b: shrink toward zero if that can help.
        b = sub._deficit_offset
        if b > tol * scale:
            return None
        a = sub.deficit(Ws) - b
        if a <= 0.0:
            return Ws
        c2 = max(0.0, (tol * scale - b)) / a
        return Ws * min(1.0, np.sqrt(c2) * (1.0 - 1e-12))

    Ws = _constrained_ascent(sub.W0, f_grad, kap, kap_grad, project, restore, params)
    return [Ws[k] for k in range(sub.K)]


class CovarianceSubproblem:
    """Concave surrogate for the sensing-covariance update (LP or ZF form).

    ``mode`` selects which rate bound is linearized; the rank-1 penalty uses
    the leading eigenpair of the expansion covariance.
    """

    def __init__(self, mode, channels, V0, weights, gamma0, u, zeta,
                 W=None, gain=None, P=None):
        if mode not in ("lp", "zf"):
            raise ContractViolation(f"unknown covariance mode {mode!r}")
        self.mode = mode
        self.channels = channels
        self.K = len(channels.H)
        self.V0 = 0.5 * (np.asarray(V0, dtype=complex) + np.asarray(V0, dtype=complex).conj().T)
        ev = np.linalg.eigvalsh(self.V0)
        if ev.min() < -1e-10:
            raise ContractViolation("expansion covariance must be PSD")
        self.weights = np.asarray(weights, dtype=float)
        self.gamma0 = float(gamma0)
        self.u = np.asarray(u, dtype=complex)
        self.zeta = float(zeta)
        self.sinr_deficit_scale = metrics.sinr_deficit_scale(channels, gamma0)
        self.g = channels.G.conj().T @ self.u
        self.lead_val, self.lead_vec = leading_eigpair(self.V0)

        if mode == "lp":
            if W is None:
                raise ContractViolation("LP covariance subproblem needs the precoders")
            self.W = [np.asarray(Wk, dtype=complex) for Wk in W]
            off = self.gamma0 * channels.noise_radar * float(np.real(np.vdot(self.u, self.u)))
            for Wk in self.W:
                off += self.gamma0 * float(np.linalg.norm(Wk.conj().T @ self.g) ** 2)
            self._deficit_offset = off
        else:
            if gain is None or P is None:
                raise ContractViolation("ZF covariance subproblem needs the precoder and gain")
            self.gain = float(gain)
            self._deficit_offset = self.gamma0 * (
                channels.noise_radar * float(np.real(np.vdot(self.u, self.u)))
                + float(np.linalg.norm(np.asarray(P).conj().T @ self.g) ** 2)
            )

        # Per-user pieces: a V-independent offset inside the log-det and the
        # Taylor coefficient of the subtracted term at V0.
        self.offs = []
        self.taylor = []
        self.c0 = np.zeros(self.K)
        for k in range(self.K):
            Hk = channels.H[k]
            n_u = Hk.shape[0]
            sig = channels.noise_user[k]
            HVH = Hk @ self.V0 @ Hk.conj().T
            if mode == "lp":
                C = sig * np.eye(n_u, dtype=complex)
                for j in range(self.K):
                    if j != k:
                        S = Hk @ self.W[j]
                        C += S @ S.conj().T
                Sk = Hk @ self.W[k]
                self.offs.append(C + Sk @ Sk.conj().T)
                B0 = C + HVH
            else:
                self.offs.append((self.gain**2 + sig) * np.eye(n_u, dtype=complex))
                B0 = sig * np.eye(n_u, dtype=complex) + HVH
            c0, _ = metrics.logdet_hpd(B0)
            self.c0[k] = c0
            self.taylor.append(Hk.conj().T @ np.linalg.solve(B0, Hk))
        self._pen_grad = self.zeta * (np.outer(self.lead_vec, self.lead_vec.conj())
                                      - np.eye(self.V0.shape[0], dtype=complex))
        self._kap_grad = -np.outer(self.g, self.g.conj()) / self.sinr_deficit_scale

    def bound_values(self, V):
        """Per-user rate lower bounds at covariance V."""
        V = np.asarray(V, dtype=complex)
        out = np.zeros(self.K)
        for k in range(self.K):
            Hk = self.channels.H[k]
            ld, _ = metrics.logdet_hpd(self.offs[k] + Hk @ V @ Hk.conj().T)
            out[k] = ld - self.c0[k] - float(np.real(np.trace(self.taylor[k] @ (V - self.V0))))
        return out

    def penalty(self, V):
        """Linearized rank-1 reward: beta_max lower bound minus the trace."""
        return float(np.real(self.lead_vec.conj() @ V @ self.lead_vec)) - float(np.real(np.trace(V)))

    def objective(self, V):
        return float(self.weights @ self.bound_values(V)) + self.zeta * self.penalty(V)

    def objective_and_grad(self, V):
        """Value and conjugate gradient sharing one factorization per user."""
        val = self.zeta * self.penalty(V)
        grad = np.array(self._pen_grad, copy=True)
        for k in range(self.K):
            Hk = self.channels.H[k]
            Bk = self.offs[k] + Hk @ V @ Hk.conj().T
            ld, _ = metrics.logdet_hpd(Bk)
            val += self.weights[k] * (
                ld - self.c0[k]
                - float(np.real(np.trace(self.taylor[k] @ (V - self.V0)))))
            grad += self.weights[k] * (Hk.conj().T @ np.linalg.solve(Bk, Hk)
                                       - self.taylor[k])
        return val, 0.5 * (grad + grad.conj().T)

    def objective_grad(self, V):
        return self.objective_and_grad(V)[1]

    def deficit(self, V):
        return self._deficit_offset - float(np.real(self.g.conj() @ V @ self.g))


def solve_covariance_subproblem(sub, params=None):
    """Maximize the penalized covariance surrogate over {V>=0, Tr<=1, deficit<=0}."""
    params = params or SubParams()
    scale = sub.sinr_deficit_scale
    tol = params.tol_feas
    gnorm2 = float(np.real(np.vdot(sub.g, sub.g)))

    def f_grad(V):
        return sub.objective_and_grad(V)

    def kap(V):
        return sub.deficit(V) / scale

    def kap_grad(V):
        return sub._kap_grad

    def restore(V):
        # Blend toward the aligned rank-1 direction; the deficit is monotone in
        # the blend weight, so bisection finds the smallest feasible push.
        if gnorm2 <= 0.0 or sub._deficit_offset - gnorm2 > tol * scale:
            return None
        P = np.outer(sub.g, sub.g.conj()) / gnorm2

        def blended(alpha):
            Vb = V + alpha * P
            tr = float(np.real(np.trace(Vb)))
            if tr > 1.0:
                Vb = Vb / tr
            return Vb

        lo, hi = 0.0, 1.0
        for _ in range(200):
            if kap(blended(hi)) <= tol * 0.5:
                break
            hi *= 2.0
            if hi > 1e12:
                return None
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if kap(blended(mid)) <= tol * 0.5:
                hi = mid
            else:
                lo = mid
        return psd_trace_project(blended(hi))

    def fw_oracle(V, g):
        # best extreme point of {V >= 0, Tr <= 1} for the linearized gain
        vals, vecs = np.linalg.eigh(0.5 * (g + g.conj().T))
        if vals[-1] > 0.0:
            x = vecs[:, -1]
            return np.outer(x, x.conj()) - V
        return -V if float(np.real(np.trace(V))) > 0.0 else None

    V = _constrained_ascent(sub.V0, f_grad, kap, kap_grad, psd_trace_project,
                            restore, params, fw_oracle=fw_oracle)
    return V
