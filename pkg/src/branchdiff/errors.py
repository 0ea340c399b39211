"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when inputs are structurally unusable (bad step size, mismatched
    dimensions, CFL violation, malformed config files)."""


class NumericalFailureError(RuntimeError):
    """Raised when a solver produces non-finite values; carries the failing layer."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class ExplosionGuardError(RuntimeError):
    """Raised when a simulated population exceeds the configured hard cap.

    The guard converts resource exhaustion into a reported error; partial
    statistics describe how far the run (or replication batch) got.
    """

    def __init__(self, message: str, *, time_reached: float | None = None,
                 population: int | None = None, n_events: int | None = None,
                 completed_replications: int | None = None):
        super().__init__(message)
        self.time_reached = time_reached
        self.population = population
        self.n_events = n_events
        self.completed_replications = completed_replications
