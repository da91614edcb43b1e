"""Exception types shared across the package."""


class FermatLensError(Exception):
    """Base class for all package errors."""


class MetricDomainError(FermatLensError):
    """Metric invariants (positive lapse, SPD spatial operator, signature) fail at a queried point."""


class DomainExitError(FermatLensError):
    """A curve left the chart domain.  Carries the parameter where it exited."""

    def __init__(self, exit_param, message=None):
        self.exit_param = float(exit_param)
        super().__init__(message or f"curve exits chart domain at s = {self.exit_param:.6g}")


class EndpointError(FermatLensError):
    """Curve endpoint does not lie on the target worldline.  Carries the offset distance."""

    def __init__(self, offset, message=None):
        self.offset = float(offset)
        super().__init__(message or f"endpoint off worldline by {self.offset:.3g}")


class CurveConstraintError(FermatLensError):
    """A causal-curve constraint (speed label, future pointing, degenerate velocity) is violated."""


class LocalityError(FermatLensError):
    """Local arrival-time minimization could not be certified; refine the partition."""


class NonConvergenceError(FermatLensError):
    """Iteration budget exhausted.  Carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class DegenerateDetectionError(FermatLensError):
    """Conjugate-point detector cannot separate a degenerate stretch; refusing to guess."""


class IndeterminateIndexError(FermatLensError):
    """A Hessian eigenvalue sits inside the zero band; increase the basis size or refine the grid."""


class EpsilonTooLargeError(FermatLensError):
    """Transition-map time shift left its admissible band; retry with a smaller epsilon."""


class FamilyConstructionError(FermatLensError):
    """Newton continuation of the epsilon-family diverged; start from a smaller epsilon."""


class ScenarioError(FermatLensError):
    """Malformed or inconsistent scenario description."""
