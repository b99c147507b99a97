"""Exception hierarchy shared by all modules."""


class SpecBiasError(Exception):
    """Base class for every error raised by this package."""


class InputError(SpecBiasError, ValueError):
    """Malformed input: wrong shape, non-finite entries, off-domain points."""


class NumericalError(SpecBiasError, ArithmeticError):
    """A numerical routine failed (no convergence, overflow)."""


class IllConditionedError(NumericalError):
    """A linear system is singular or too close to singular to solve."""

    def __init__(self, message, smallest_eigenvalue=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class InvalidSpectrumMapError(SpecBiasError, ValueError):
    """A spectrum map produced a negative (or non-finite) eigenvalue."""


class DivergenceError(NumericalError):
    """An iterative training loop blew up."""

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(SpecBiasError, ValueError):
    """Bad experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
