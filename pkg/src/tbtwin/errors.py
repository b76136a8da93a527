"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A parameter set violates a documented invariant."""


class DelayMismatch(ConfigError):
    """Interferometer imbalance does not match the pulse spacing."""


class UnknownModel(ValueError):
    pass


class DomainError(ValueError):
    pass


class NoSolution(ValueError):
    """Jitter calibration targets cannot be met by the tail model."""


class NoPeak(ValueError):
    pass


class DegenerateFit(ValueError):
    """Fringe fit has no usable contrast; the fallback fit is attached."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class SimulationError(RuntimeError):
    pass
