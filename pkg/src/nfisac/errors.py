"""Exception types shared across the package."""


class NfIsacError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(NfIsacError):
    """Degenerate geometry, e.g. coincident transmit/receive points."""


class ScenarioError(NfIsacError):
    """Scenario or placement parameters violate a structural requirement."""


class NumericalError(NfIsacError):
    """A metric evaluated to a non-finite value or a factorization failed twice."""


class RankDeficiencyError(NfIsacError):
    """H_e H_e^H is too ill-conditioned for zero-forcing.

    Carries the measured condition number in ``cond``.
    """

    def __init__(self, cond):
        super().__init__(f"H_e H_e^H condition number {cond:.3e} exceeds threshold")
        self.cond = cond


class ContractViolation(NfIsacError):
    """Caller broke an interface precondition (stale cache, shape mismatch...)."""


class InfeasibleSubproblemError(NfIsacError):
    """No feasible point found for a convex subproblem within the iteration cap."""


class ProbeError(NfIsacError):
    """A finite-difference probe evaluated to a non-finite value."""

    def __init__(self, coord, value):
        super().__init__(f"non-finite probe value {value!r} at coordinate {coord}")
        self.coord = coord


class PlacementError(NfIsacError):
    """Random placement could not satisfy the spacing constraint."""


class ConfigError(NfIsacError):
    """Experiment configuration is invalid."""


class OptimizationAbort(NfIsacError):
    """Two consecutive full alternating-optimization loops failed."""
