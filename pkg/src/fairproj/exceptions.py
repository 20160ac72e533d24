"""Exception hierarchy and warning categories."""

from __future__ import annotations


class FairprojError(Exception):
    """Base class for all library errors."""


class DomainError(FairprojError):
    """A covariate lies outside the covariate box."""


class ValidationError(FairprojError):
    """Malformed dataset, CSV file, or configuration."""


class EstimationError(FairprojError):
    """Model fitting failed."""


class SeparationError(EstimationError):
    """A group contains a single treatment class; propensities are not identifiable.

    Increasing the ridge weight usually resolves quasi-separation.
    """


class NumericError(FairprojError):
    """Non-finite values or a numerically impossible computation."""


class UnboundedDualError(NumericError):
    """Dual ascent kept hitting the multiplier box after repeated doublings.

    Signals either an alternative far from feasibility or a failing
    fair-point precondition (no covariate is simultaneously fair and
    utility-attaining).
    """


class AssumptionViolationError(FairprojError):
    """Precondition checks failed; the test was blocked before solving."""

    def __init__(self, report):
        self.report = report
        lines = "; ".join(v["message"] for v in report.violations)
        super().__init__(f"assumption checks failed: {lines}")


class DegenerateScoreWarning(UserWarning):
    """Score directions with zero curvature; the bound saturates at the multiplier cap."""


class BoundaryHitWarning(UserWarning):
    """Dual argmax touched the multiplier box boundary."""


class KernelUnderflowWarning(UserWarning):
    """All but the nearest kernel weight underflowed; prediction degenerates to nearest neighbour."""
