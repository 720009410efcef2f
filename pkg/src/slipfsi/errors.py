"""Exception taxonomy shared by all slipfsi modules."""


class SlipFsiError(Exception):
    """Base class for all package errors."""


class PlacementOutsideDomain(SlipFsiError):
    """Placed body intersects or leaves the outer domain."""


class MarginViolated(SlipFsiError):
    """Trajectory breaks the d/2 collision safety margin."""


class FlowIntegrationDiverged(SlipFsiError):
    """Extension-flow ODE integration failed (non-finite or det drift)."""


class SingularMetric(SlipFsiError):
    """Covariant metric determinant below tolerance."""


class GridMismatch(SlipFsiError):
    """Field sampled on a different grid than the metric/maps."""


class MeshTooCoarse(SlipFsiError):
    """Mesh cannot represent the boundary terms positively."""


class AssemblyFailed(SlipFsiError):
    """Finite element assembly produced an invalid operator."""


class LinearSolveFailed(SlipFsiError):
    """Saddle-point solve residual above tolerance."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class NonFiniteState(SlipFsiError):
    """State vector contains NaN or Inf."""


class FixedPointDiverged(SlipFsiError):
    """Picard iteration on the nonlinear remainder failed to contract."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class EtaConstructionFailed(SlipFsiError):
    """Weight base eta still has critical points outside the core region."""


class OverflowGuard(SlipFsiError):
    """Carleman exponents exceed the representable range."""


class QuadratureUnderflow(SlipFsiError):
    """Weighted quadrature lost all significance."""


class CGStalled(SlipFsiError):
    """Conjugate gradient made no residual progress over 20 iterations."""


class PenaltyTooSmall(SlipFsiError):
    """HUM penalty produced an ill-conditioned dual problem."""


class ConfigInvalid(SlipFsiError):
    """Configuration file failed validation."""

    def __init__(self, msg, key=None):
        super().__init__(msg)
        self.key = key
