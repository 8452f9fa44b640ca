"""Exception types shared across the package."""


class TopoaugError(Exception):
    pass


class ParameterError(TopoaugError):
    """Invalid argument value (bad topology size, bad distribution params, ...)."""


class BudgetError(TopoaugError):
    """More optical links requested than the switch supports."""


class RoutingError(TopoaugError):
    """No path between two endpoints."""


class TraceError(TopoaugError):
    """Malformed or invalid trace input."""


class StateError(TopoaugError):
    """Operation invoked in the wrong lifecycle state."""


class NumericError(TopoaugError):
    """Non-finite value produced by the numeric kernel."""


class ConfigError(TopoaugError):
    """Invalid or unknown configuration key/value."""
