"""Exception types shared across the package."""


class BeliefPicError(Exception):
    """Base class for all package errors."""


class InvalidArgument(BeliefPicError, ValueError):
    pass


class UnsupportedCost(InvalidArgument):
    pass


class MatchingInfeasible(BeliefPicError):
    """The matching set is empty (or the covariance left the PD cone).

    Carries the time, the offending covariance and the best residual found.
    """

    def __init__(self, t, Sigma, residual, msg=None):
        self.t = float(t)
        self.Sigma = Sigma
        self.residual = float(residual)
        super().__init__(msg or f"matching set empty at t={self.t:.6g} (best residual {self.residual:.3g})")


class InfeasibleHorizon(BeliefPicError):
    """Requested horizon extends past the feasibility horizon t*."""

    def __init__(self, t_star, T):
        self.t_star = float(t_star)
        self.T = float(T)
        super().__init__(f"horizon T={self.T:.6g} is not below feasibility horizon t*={self.t_star:.6g}")


class DegenerateWeights(BeliefPicError, FloatingPointError):
    pass


class PositivityViolation(BeliefPicError, FloatingPointError):
    pass
