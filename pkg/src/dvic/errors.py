"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid argument or configuration value."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge within its iteration cap."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class LoadError(ValueError):
    """Malformed or inconsistent input file."""


class DegenerateSimplexError(ParameterError):
    """Requested simplex order exceeds the affine dimension of the data."""


class DisconnectedGraphError(ParameterError):
    """Operation undefined on a disconnected graph; handle per component."""
