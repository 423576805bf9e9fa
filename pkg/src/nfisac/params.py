"""Algorithm parameters shared by the LP and ZF optimization stacks."""

from __future__ import annotations

from dataclasses import dataclass, field

from .subsolver import SubParams


@dataclass
class AlgoParams:
    """Convergence thresholds, line-search constants, and iteration caps.

    Defaults follow the evaluation setup: Armijo constant delta = 1e-2 with
    backtrack factor tau = 1/2, unit initial step sizes, ALM seed p0 = 1
    with growth theta = 10, eps_L = 1e-3 (relative, inner loop),
    eps_f = 1e-2 (outer WSR), eps_s = 1e-2 (SCA surrogate improvement).
    """

    eps_s: float = 1e-2
    eps_l: float = 1e-3
    eps_f: float = 1e-2
    delta: float = 1e-2          # Armijo-Goldstein constant
    tau: float = 0.5             # backtrack factor
    mu0: float = 1.0             # user-PGM initial step
    nu0: float = 1.0             # BS-PGM initial step
    alpha0: float = 1.0          # ZF user-ALM initial step
    p0: float = 1.0              # ALM penalty seed
    theta: float = 10.0          # ALM penalty growth
    p_cap: float = 1e6
    max_outer: int = 30          # AO iterations
    max_ls: int = 60             # line-search trials
    sca_max: int = 30            # SCA rounds per block
    pgm_max_steps: int = 60      # accepted steps per position block
    pgm_tol: float = 1e-6        # relative improvement stop for position blocks
    alm_max_outer: int = 8       # multiplier updates per position-ALM block
    inner_pgm_max: int = 120     # PGM steps per ALM round
    tol_feas: float = 1e-8       # on the scaled SINR deficit
    wsr_slack: float = 1e-9      # allowed per-block WSR loss before rejection
    sub: SubParams = field(default_factory=SubParams)

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie in (0, 1)")
        if not self.theta > 1.0:
            raise ValueError("theta must exceed 1")
        for name in ("eps_s", "eps_l", "eps_f", "delta", "mu0", "nu0",
                     "alpha0", "p0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
