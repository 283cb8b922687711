"""Exception hierarchy shared across the package."""


class CavflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CavflowError):
    """A scenario or solver configuration violates an invariant."""


class DegenerateHorizonError(CavflowError):
    """Trajectory solve requested over a (near-)zero time horizon."""


class PlanDomainError(CavflowError):
    """Query outside a trajectory plan's validity window."""


class InvalidPlanError(CavflowError):
    """Plan violates a structural assumption (e.g. non-monotone position)."""


class OrderingError(CavflowError):
    """Vehicles supplied in an order inconsistent with their positions."""


class ModelError(CavflowError):
    """GNN model is dimensionally inconsistent with its inputs."""


class ModelFormatError(CavflowError):
    """Model file is malformed or has an unsupported version."""


class DataError(CavflowError):
    """Dataset or snapshot file is malformed."""
