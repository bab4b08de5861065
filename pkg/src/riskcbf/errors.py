"""Domain error types raised across the package.

Each error marks a violated precondition or domain boundary of one operation;
they deliberately subclass ValueError/RuntimeError so callers that do not care
about the fine-grained taxonomy can still catch the broad class.
"""


class RiskcbfError(Exception):
    """Base class for all package errors."""


class PlantStall(RiskcbfError, RuntimeError):
    """Forward speed dropped to zero or below mid-run."""


class SpeedDomain(RiskcbfError, ValueError):
    """An operation dividing by vx was called with vx <= 0."""


class LoadDomain(RiskcbfError, ValueError):
    """A vertical load was nonpositive where positive loads are required."""


class SingularLoadRegime(RiskcbfError, ValueError):
    """Load scale w fell below the configured floor; the load-variance term diverges there."""


class RiskDomain(RiskcbfError, ValueError):
    """Risk level outside the open interval (0, 1/2)."""


class VarianceDomain(RiskcbfError, ValueError):
    """Negative variance/standard deviation supplied."""


class JacobianDegenerate(RiskcbfError, ValueError):
    """Prediction Jacobian M = I + dt*J_r is singular or ill-conditioned."""


class DOFDomain(RiskcbfError, ValueError):
    """Inverse-Wishart degrees of freedom too small for a defined posterior mean."""


class ForgettingDomain(RiskcbfError, ValueError):
    """Optimal forgetting factor fell outside (0, 1): drift too fast for this estimator."""


class QPNoConverge(RiskcbfError, RuntimeError):
    """Active-set QP exceeded its iteration cap. Carries the residual report."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class SCPStalled(RiskcbfError, RuntimeError):
    """All backtracking steps failed; the previous iterate is the answer."""


class GDegenerate(RiskcbfError, ValueError):
    """Nominal input matrix numerically zero; no pseudo-inverse compensation possible."""


class PathDomain(RiskcbfError, ValueError):
    """Reference path empty or lookup failed."""


class ScenarioDomain(RiskcbfError, ValueError):
    """Unknown scenario kind or out-of-range override."""


class ConfigError(RiskcbfError, ValueError):
    """Configuration text failed validation; message carries line/field detail."""
